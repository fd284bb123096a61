#pragma once

#include <array>
#include <string>

#include "flexicup/scene.hpp"

namespace flexicup::physics {

// The four modular bottom configurations. Only Config I's force rating is a
// measured value; II-IV span the advertised sub-Newton-to-30N range and are
// marked "assumed" in the registry file.
class ConfigRegistry {
 public:
  static ConfigRegistry defaults();
  static ConfigRegistry from_json(const std::string& text);
  static ConfigRegistry load(const std::string& path);

  const scene::CupFootprint& get(scene::ConfigId id) const;
  std::string to_json() const;
  void save(const std::string& path) const;

 private:
  std::array<scene::CupFootprint, 4> cups_;
};

}  // namespace flexicup::physics
