#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flexicup/sensor.hpp"

namespace flexicup::perception {

// Classical stand-ins for the learned detector / segmenter / classifier
// stack. All pure functions over Frames; deterministic by construction.

struct DetectionResult {
  bool found = false;
  double bearing_rad = 0.0;  // direction of the target in the cup frame
  double offset_norm = 0.0;  // annulus-radial distance proxy in [0, 1]
};

struct ContactSegmentation {
  int width_px = 0;
  int height_px = 0;
  std::vector<std::uint8_t> mask;  // frame raster, 1 inside the contact blob
  double coverage = 0.0;           // |mask| / central-disk pixel count
  double flatness = 0.0;           // 1 - normalized shading variance in mask
};

struct StepHint {
  double dx = 0.0;  // unit step direction on the board
  double dy = 0.0;
  bool from_edges = false;  // false: fallback to the supplied default
};

// Thresholds the peripheral annulus for the marker gray band and returns the
// centroid bearing. Throws ModalityError on a tactile frame.
DetectionResult detect_target(const sensor::Frame& frame);

// Pixels of the central disk deviating from the no-contact baseline by more
// than 15 levels. Throws ModalityError on a vision frame.
ContactSegmentation segment_contact(const sensor::Frame& frame);

// Mean intensity-gradient direction in the central disk, pointing from dark
// (cluttered) toward bright (clear) board. Falls back to the supplied
// serpentine default when the view is uniform. Throws ModalityError on a
// tactile frame.
StepHint edge_step_hint(const sensor::Frame& frame, double default_dx = 1.0,
                        double default_dy = 0.0);

// ---------------------------------------------------------------------------
// Object archetype library and multimodal classifier.

struct VisionSignature {
  double base = 128.0;   // two-level azimuthal pattern painted in the annulus
  double amp = 40.0;
  int sectors = 4;
  double phase = 0.0;
};

struct TactileSignature {
  int bumps = 0;            // bump ring layout pressed into the membrane
  double radius_frac = 0.5; // ring radius as a fraction of the membrane radius
  double sigma_mm = 1.0;
  double depth_mm = 0.5;
  double base_mm = 0.7;     // uniform indentation under the texture
  double phase = 0.0;
};

struct Archetype {
  std::string id;
  VisionSignature vision;
  TactileSignature tactile;
};

enum class Fusion { VisionOnly, TactileOnly, Fused };

struct Classification {
  std::string label;
  std::vector<double> scores;  // per archetype, library id order
};

class ObjectLibrary {
 public:
  static ObjectLibrary defaults();
  static ObjectLibrary from_json(const std::string& text);
  static ObjectLibrary load(const std::string& path);
  std::string to_json() const;
  void save(const std::string& path) const;

  // Sorted by id; index order matches Classification::scores.
  const std::vector<Archetype>& archetypes() const { return archetypes_; }
  const Archetype& get(const std::string& id) const;  // ParamError if unknown

  // Canonical synthetic views of one archetype. Unknown id → ParamError.
  sensor::Frame vision_frame(const std::string& id) const;
  sensor::Frame tactile_frame(const std::string& id) const;

 private:
  explicit ObjectLibrary(std::vector<Archetype> archetypes);
  std::vector<Archetype> archetypes_;
  std::vector<std::vector<double>> vision_centroids_;
  std::vector<std::vector<double>> tactile_centroids_;
  friend Classification classify_object(const ObjectLibrary&,
                                        const sensor::Frame&,
                                        const sensor::Frame&, Fusion);
};

// Normalized 16-bin features consumed by the nearest-centroid classifier.
std::vector<double> vision_feature(const sensor::Frame& frame);
std::vector<double> tactile_feature(const sensor::Frame& frame);

// Nearest-centroid classification; Fused sums the two normalized score
// vectors. Ties resolve to the lexicographically smallest id.
Classification classify_object(const ObjectLibrary& lib,
                               const sensor::Frame& vision_frame,
                               const sensor::Frame& tactile_frame,
                               Fusion fusion);

}  // namespace flexicup::perception
