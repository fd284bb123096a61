#include "flexicup/registry.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "flexicup/error.hpp"

namespace flexicup::physics {

using scene::ConfigId;
using scene::CupFootprint;
using scene::SuctionMode;

ConfigRegistry ConfigRegistry::defaults() {
  ConfigRegistry r;
  r.cups_[0] = CupFootprint{1.14, 1.7, 2.0, SuctionMode::Vacuum, ConfigId::I, 34.3, "paper"};
  r.cups_[1] = CupFootprint{0.80, 1.1, 1.4, SuctionMode::Vacuum, ConfigId::II, 10.0, "assumed"};
  r.cups_[2] = CupFootprint{0.90, 1.2, 1.5, SuctionMode::Bernoulli, ConfigId::III, 5.0, "assumed"};
  r.cups_[3] = CupFootprint{0.50, 0.8, 1.0, SuctionMode::Bernoulli, ConfigId::IV, 0.8, "assumed"};
  return r;
}

const CupFootprint& ConfigRegistry::get(ConfigId id) const {
  return cups_[static_cast<std::size_t>(id)];
}

std::string ConfigRegistry::to_json() const {
  nlohmann::json j;
  for (const auto& cup : cups_) {
    nlohmann::json e;
    e["mode"] = scene::to_string(cup.mode);
    e["membrane_radius_cm"] = cup.membrane_radius_cm;
    e["rim_inner_cm"] = cup.rim_inner_cm;
    e["rim_outer_cm"] = cup.rim_outer_cm;
    e["f_max_newton"] = cup.f_max_newton;
    e["provenance"] = cup.provenance;
    j[scene::to_string(cup.config_id)] = e;
  }
  return j.dump(2);
}

ConfigRegistry ConfigRegistry::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("registry JSON parse failure: ") + e.what());
  }
  ConfigRegistry r = defaults();
  for (auto& cup : r.cups_) {
    const std::string key = scene::to_string(cup.config_id);
    if (!j.contains(key)) throw IoError("registry missing configuration " + key);
    const auto& e = j.at(key);
    try {
      cup.mode = scene::suction_mode_from_string(e.at("mode").get<std::string>());
      cup.membrane_radius_cm = e.at("membrane_radius_cm").get<double>();
      cup.rim_inner_cm = e.at("rim_inner_cm").get<double>();
      cup.rim_outer_cm = e.at("rim_outer_cm").get<double>();
      cup.f_max_newton = e.at("f_max_newton").get<double>();
      cup.provenance = e.at("provenance").get<std::string>();
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("registry configuration " + key + " malformed: " + ex.what());
    }
    if (cup.provenance != "paper" && cup.provenance != "assumed")
      throw IoError("registry provenance must be 'paper' or 'assumed'");
  }
  return r;
}

ConfigRegistry ConfigRegistry::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open registry file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return from_json(ss.str());
}

void ConfigRegistry::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open registry file for writing: " + path);
  f << to_json() << "\n";
}

}  // namespace flexicup::physics
