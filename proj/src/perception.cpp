#include "flexicup/perception.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "flexicup/error.hpp"

namespace flexicup::perception {

namespace {

constexpr double kMarkerBandLo = 110.0;
constexpr double kMarkerBandHi = 130.0;
constexpr int kMinBlobArea = 20;
constexpr double kBaselineValue = 30.0;   // ambient-lit membrane, no contact
constexpr double kDeviationLevels = 15.0;
constexpr double kContactAmplitude = 90.0;  // full-scale contact brightness

void require_modality(const sensor::Frame& frame, sensor::Modality want,
                      const char* op) {
  if (frame.modality != want)
    throw ModalityError(std::string(op) + ": frame has the wrong modality");
}

struct Zones {
  double cx, cy, central_r, outer_r;
};

Zones zones_of(const sensor::Frame& frame) {
  return {static_cast<double>(frame.zones.center_x_px),
          static_cast<double>(frame.zones.center_y_px),
          static_cast<double>(frame.zones.central_radius_px),
          static_cast<double>(frame.zones.peripheral_outer_px)};
}

}  // namespace

DetectionResult detect_target(const sensor::Frame& frame) {
  require_modality(frame, sensor::Modality::Vision, "detect_target");
  const auto z = zones_of(frame);
  DetectionResult out;
  long count = 0;
  double sum_x = 0.0, sum_y = 0.0;
  for (int py = 0; py < frame.height_px; ++py) {
    for (int px = 0; px < frame.width_px; ++px) {
      const double dx = px + 0.5 - z.cx;
      const double dy = py + 0.5 - z.cy;
      const double r = std::hypot(dx, dy);
      if (r <= z.central_r || r > z.outer_r) continue;
      const double v = frame.at(px, py);
      if (v < kMarkerBandLo || v > kMarkerBandHi) continue;
      ++count;
      sum_x += dx;
      sum_y += dy;
    }
  }
  if (count < kMinBlobArea) return out;
  out.found = true;
  const double mx = sum_x / count;
  const double my = sum_y / count;
  out.bearing_rad = std::atan2(my, mx);
  const double span = z.outer_r - z.central_r;
  out.offset_norm = std::clamp((std::hypot(mx, my) - z.central_r) / span, 0.0, 1.0);
  return out;
}

ContactSegmentation segment_contact(const sensor::Frame& frame) {
  require_modality(frame, sensor::Modality::Tactile, "segment_contact");
  const auto z = zones_of(frame);
  ContactSegmentation out;
  out.width_px = frame.width_px;
  out.height_px = frame.height_px;
  out.mask.assign(frame.pixels.size(), 0);

  long disk = 0, hit = 0;
  double sum = 0.0, sum_sq = 0.0;
  for (int py = 0; py < frame.height_px; ++py) {
    for (int px = 0; px < frame.width_px; ++px) {
      const double dx = px + 0.5 - z.cx;
      const double dy = py + 0.5 - z.cy;
      if (dx * dx + dy * dy > z.central_r * z.central_r) continue;
      ++disk;
      const double v = frame.at(px, py);
      if (std::abs(v - kBaselineValue) <= kDeviationLevels) continue;
      out.mask[static_cast<std::size_t>(py) * frame.width_px + px] = 1;
      ++hit;
      sum += v;
      sum_sq += v * v;
    }
  }
  out.coverage = disk == 0 ? 0.0 : static_cast<double>(hit) / disk;
  if (hit == 0) {
    out.flatness = 1.0;
  } else {
    const double mean = sum / hit;
    const double var = std::max(0.0, sum_sq / hit - mean * mean);
    out.flatness =
        std::clamp(1.0 - var / (kContactAmplitude * kContactAmplitude), 0.0, 1.0);
  }
  return out;
}

StepHint edge_step_hint(const sensor::Frame& frame, double default_dx,
                        double default_dy) {
  require_modality(frame, sensor::Modality::Vision, "edge_step_hint");
  const auto z = zones_of(frame);
  StepHint out{default_dx, default_dy, false};

  // Mean intensity gradient over the central disk. The vector points from
  // dark clutter toward clear board, so it doubles as a step suggestion;
  // its coherence against the total gradient mass separates a real border
  // from texture noise or a featureless view.
  double gx_sum = 0.0, gy_sum = 0.0, mag_sum = 0.0;
  long n = 0;
  const double r2 = (z.central_r - 1.0) * (z.central_r - 1.0);
  for (int py = 1; py + 1 < frame.height_px; ++py) {
    for (int px = 1; px + 1 < frame.width_px; ++px) {
      const double dx = px + 0.5 - z.cx;
      const double dy = py + 0.5 - z.cy;
      if (dx * dx + dy * dy > r2) continue;
      const double gx =
          0.5 * (static_cast<double>(frame.at(px + 1, py)) - frame.at(px - 1, py));
      const double gy =
          0.5 * (static_cast<double>(frame.at(px, py + 1)) - frame.at(px, py - 1));
      gx_sum += gx;
      gy_sum += gy;
      mag_sum += std::hypot(gx, gy);
      ++n;
    }
  }
  if (n == 0) return out;
  const double mean_mag = mag_sum / n;
  const double mean_len = std::hypot(gx_sum, gy_sum) / n;
  if (mean_mag < 0.5 || mean_len < 0.3 * mean_mag) return out;  // uniform view
  out.dx = gx_sum / (mean_len * n);
  out.dy = gy_sum / (mean_len * n);
  out.from_edges = true;
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0l, 255l));
}

sensor::Frame blank_frame(sensor::Modality modality) {
  const auto intr = sensor::CameraIntrinsics{}.downscaled(4);
  sensor::Frame f;
  f.width_px = intr.width_px;
  f.height_px = intr.height_px;
  f.zones = intr.zones;
  f.modality = modality;
  f.pixels.assign(static_cast<std::size_t>(f.width_px) * f.height_px, 15);
  return f;
}

std::vector<double> normalized(std::vector<double> hist) {
  double total = 0.0;
  for (double h : hist) total += h;
  if (total > 0.0)
    for (double& h : hist) h /= total;
  return hist;
}

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

std::vector<Archetype> default_archetypes() {
  // Two vision-twin pairs (ball/block, bottle/box), two tactile-twin pairs
  // (brush/can, cap/cube), and five objects separable in both modalities.
  std::vector<Archetype> a;
  a.push_back({"ball", {150, 50, 4, 0.0}, {1, 0.0, 2.5, 1.0, 0.5, 0.0}});
  a.push_back({"block", {150, 50, 4, 0.0}, {4, 0.55, 1.2, 0.7, 0.5, 0.4}});
  a.push_back({"bottle", {100, 30, 8, 0.3}, {2, 0.45, 1.8, 0.9, 0.6, 0.0}});
  a.push_back({"box", {100, 30, 8, 0.3}, {6, 0.65, 0.8, 0.5, 0.6, 0.2}});
  a.push_back({"brush", {120, 80, 5, 0.0}, {3, 0.5, 1.5, 0.6, 0.7, 0.1}});
  a.push_back({"can", {180, 40, 3, 0.7}, {3, 0.5, 1.5, 0.6, 0.7, 0.1}});
  a.push_back({"cap", {90, 50, 6, 0.2}, {7, 0.6, 1.0, 0.9, 0.6, 0.3}});
  a.push_back({"cube", {200, 30, 4, 0.5}, {7, 0.6, 1.0, 0.9, 0.6, 0.3}});
  a.push_back({"disk", {130, 10, 2, 0.0}, {5, 0.5, 1.3, 0.8, 0.55, 0.0}});
  a.push_back({"plate", {160, 70, 7, 0.1}, {8, 0.7, 0.9, 0.6, 0.65, 0.2}});
  a.push_back({"ring", {110, 90, 2, 0.4}, {9, 0.75, 0.7, 0.5, 0.6, 0.1}});
  a.push_back({"tile", {140, 20, 6, 0.0}, {0, 0.0, 1.0, 0.0, 0.8, 0.0}});
  a.push_back({"tube", {170, 60, 5, 0.6}, {2, 0.7, 2.0, 1.1, 0.7, 0.5}});
  return a;
}

}  // namespace

ObjectLibrary::ObjectLibrary(std::vector<Archetype> archetypes)
    : archetypes_(std::move(archetypes)) {
  if (archetypes_.empty()) throw ParamError("object library is empty");
  std::sort(archetypes_.begin(), archetypes_.end(),
            [](const Archetype& a, const Archetype& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < archetypes_.size(); ++i)
    if (archetypes_[i].id == archetypes_[i - 1].id)
      throw ParamError("duplicate archetype id: " + archetypes_[i].id);
  for (const auto& arch : archetypes_) {
    vision_centroids_.push_back(vision_feature(vision_frame(arch.id)));
    tactile_centroids_.push_back(tactile_feature(tactile_frame(arch.id)));
  }
}

ObjectLibrary ObjectLibrary::defaults() { return ObjectLibrary(default_archetypes()); }

const Archetype& ObjectLibrary::get(const std::string& id) const {
  for (const auto& arch : archetypes_)
    if (arch.id == id) return arch;
  throw ParamError("unknown archetype id: " + id);
}

sensor::Frame ObjectLibrary::vision_frame(const std::string& id) const {
  const auto& arch = get(id);
  auto f = blank_frame(sensor::Modality::Vision);
  const auto z = zones_of(f);
  for (int py = 0; py < f.height_px; ++py) {
    for (int px = 0; px < f.width_px; ++px) {
      const double dx = px + 0.5 - z.cx;
      const double dy = py + 0.5 - z.cy;
      const double r = std::hypot(dx, dy);
      if (r > z.outer_r) continue;
      std::uint8_t v;
      if (r <= z.central_r) {
        v = 200;
      } else {
        const double phi = std::atan2(dy, dx);
        const double s = std::sin(arch.vision.sectors * phi + arch.vision.phase);
        v = quantize(arch.vision.base + (s >= 0.0 ? 1.0 : -1.0) * arch.vision.amp);
      }
      f.pixels[static_cast<std::size_t>(py) * f.width_px + px] = v;
    }
  }
  return f;
}

sensor::Frame ObjectLibrary::tactile_frame(const std::string& id) const {
  const auto& arch = get(id);
  auto f = blank_frame(sensor::Modality::Tactile);
  const auto z = zones_of(f);

  const int n = 64;
  const double mem_r = scene::CupFootprint{}.membrane_radius_cm;
  std::vector<double> deformation(static_cast<std::size_t>(n) * n, 0.0);
  const double step = 2.0 * mem_r / n;
  for (int iy = 0; iy < n; ++iy) {
    for (int ix = 0; ix < n; ++ix) {
      const double u = -mem_r + (ix + 0.5) * step;
      const double v = -mem_r + (iy + 0.5) * step;
      double d = arch.tactile.base_mm;
      const double sigma_cm = arch.tactile.sigma_mm / 10.0;
      for (int j = 0; j < arch.tactile.bumps; ++j) {
        const double ang =
            2.0 * M_PI * j / std::max(1, arch.tactile.bumps) + arch.tactile.phase;
        const double bx = arch.tactile.radius_frac * mem_r * std::cos(ang);
        const double by = arch.tactile.radius_frac * mem_r * std::sin(ang);
        const double q = ((u - bx) * (u - bx) + (v - by) * (v - by)) /
                         (2.0 * sigma_cm * sigma_cm);
        d += arch.tactile.depth_mm * std::exp(-q);
      }
      deformation[static_cast<std::size_t>(iy * n + ix)] = d;
    }
  }

  const int size = 2 * f.zones.central_radius_px;
  const auto shade = sensor::synth_tactile_shading(deformation, n, mem_r, size);
  const int x0 = f.zones.center_x_px - f.zones.central_radius_px;
  const int y0 = f.zones.center_y_px - f.zones.central_radius_px;
  for (int py = 0; py < f.height_px; ++py) {
    for (int px = 0; px < f.width_px; ++px) {
      const double dx = px + 0.5 - z.cx;
      const double dy = py + 0.5 - z.cy;
      const double r = std::hypot(dx, dy);
      std::uint8_t v = 15;
      if (r <= z.central_r) {
        const int sx = px - x0;
        const int sy = py - y0;
        v = (sx >= 0 && sy >= 0 && sx < size && sy < size)
                ? shade[static_cast<std::size_t>(sy) * size + sx]
                : std::uint8_t{30};
      } else if (r <= z.outer_r) {
        v = 40;  // dimmed annulus placeholder
      }
      f.pixels[static_cast<std::size_t>(py) * f.width_px + px] = v;
    }
  }
  return f;
}

std::vector<double> vision_feature(const sensor::Frame& frame) {
  const auto z = zones_of(frame);
  std::vector<double> hist(16, 0.0);
  for (int py = 0; py < frame.height_px; ++py) {
    for (int px = 0; px < frame.width_px; ++px) {
      const double dx = px + 0.5 - z.cx;
      const double dy = py + 0.5 - z.cy;
      const double r = std::hypot(dx, dy);
      if (r <= z.central_r || r > z.outer_r) continue;
      hist[frame.at(px, py) / 16] += 1.0;
    }
  }
  return normalized(std::move(hist));
}

std::vector<double> tactile_feature(const sensor::Frame& frame) {
  const auto z = zones_of(frame);
  std::vector<double> hist(16, 0.0);
  const double r2 = (z.central_r - 1.0) * (z.central_r - 1.0);
  for (int py = 1; py + 1 < frame.height_px; ++py) {
    for (int px = 1; px + 1 < frame.width_px; ++px) {
      const double dx = px + 0.5 - z.cx;
      const double dy = py + 0.5 - z.cy;
      if (dx * dx + dy * dy > r2) continue;
      const double gx =
          0.5 * (static_cast<double>(frame.at(px + 1, py)) - frame.at(px - 1, py));
      const double gy =
          0.5 * (static_cast<double>(frame.at(px, py + 1)) - frame.at(px, py - 1));
      const int bin = std::min(15, static_cast<int>(std::hypot(gx, gy) / 2.0));
      hist[bin] += 1.0;
    }
  }
  return normalized(std::move(hist));
}

Classification classify_object(const ObjectLibrary& lib,
                               const sensor::Frame& vision_frame,
                               const sensor::Frame& tactile_frame,
                               Fusion fusion) {
  require_modality(vision_frame, sensor::Modality::Vision, "classify_object");
  require_modality(tactile_frame, sensor::Modality::Tactile, "classify_object");

  const auto n = lib.archetypes_.size();
  const auto score_against = [n](const std::vector<double>& feat,
                                 const std::vector<std::vector<double>>& centroids) {
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i)
      s[i] = 1.0 / (distance(feat, centroids[i]) + 1e-9);
    return normalized(std::move(s));
  };

  std::vector<double> scores(n, 0.0);
  if (fusion == Fusion::VisionOnly || fusion == Fusion::Fused) {
    const auto s = score_against(vision_feature(vision_frame), lib.vision_centroids_);
    for (std::size_t i = 0; i < n; ++i) scores[i] += s[i];
  }
  if (fusion == Fusion::TactileOnly || fusion == Fusion::Fused) {
    const auto s =
        score_against(tactile_feature(tactile_frame), lib.tactile_centroids_);
    for (std::size_t i = 0; i < n; ++i) scores[i] += s[i];
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < n; ++i)
    if (scores[i] > scores[best]) best = i;  // ties keep the smaller id
  return {lib.archetypes_[best].id, std::move(scores)};
}

// ---------------------------------------------------------------------------

std::string ObjectLibrary::to_json() const {
  nlohmann::json root;
  root["archetypes"] = nlohmann::json::array();
  for (const auto& a : archetypes_) {
    root["archetypes"].push_back(
        {{"id", a.id},
         {"vision",
          {{"base", a.vision.base},
           {"amp", a.vision.amp},
           {"sectors", a.vision.sectors},
           {"phase", a.vision.phase}}},
         {"tactile",
          {{"bumps", a.tactile.bumps},
           {"radius_frac", a.tactile.radius_frac},
           {"sigma_mm", a.tactile.sigma_mm},
           {"depth_mm", a.tactile.depth_mm},
           {"base_mm", a.tactile.base_mm},
           {"phase", a.tactile.phase}}}});
  }
  return root.dump(2) + "\n";
}

ObjectLibrary ObjectLibrary::from_json(const std::string& text) {
  try {
    const auto root = nlohmann::json::parse(text);
    std::vector<Archetype> archetypes;
    for (const auto& e : root.at("archetypes")) {
      Archetype a;
      a.id = e.at("id").get<std::string>();
      const auto& v = e.at("vision");
      a.vision = {v.at("base").get<double>(), v.at("amp").get<double>(),
                  v.at("sectors").get<int>(), v.at("phase").get<double>()};
      const auto& t = e.at("tactile");
      a.tactile = {t.at("bumps").get<int>(),      t.at("radius_frac").get<double>(),
                   t.at("sigma_mm").get<double>(), t.at("depth_mm").get<double>(),
                   t.at("base_mm").get<double>(),  t.at("phase").get<double>()};
      archetypes.push_back(std::move(a));
    }
    return ObjectLibrary(std::move(archetypes));
  } catch (const nlohmann::json::exception& e) {
    throw ParamError(std::string("malformed object library: ") + e.what());
  }
}

ObjectLibrary ObjectLibrary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read object library: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

void ObjectLibrary::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write object library: " + path);
  out << to_json();
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace flexicup::perception
