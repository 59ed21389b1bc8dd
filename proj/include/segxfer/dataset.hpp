#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "segxfer/tensor.hpp"

namespace segxfer {

/// Label codes of the segmentation ground truth.
enum class Anatomy : std::uint8_t { background = 0, right_atrium, left_atrium, right_ventricle, left_ventricle, myocardium };
inline constexpr int kNumLabels = 6;
inline constexpr const char* kLabelNames[kNumLabels] = {"BG", "RA", "LA", "RV", "LV", "Myo"};

enum class SampleKind { normal, effusion, septal };

inline std::string_view to_string(SampleKind k) {
  switch (k) {
    case SampleKind::normal: return "normal";
    case SampleKind::effusion: return "effusion";
    case SampleKind::septal: return "septal";
  }
  return "?";
}

inline SampleKind parse_sample_kind(std::string_view s) {
  if (s == "normal") return SampleKind::normal;
  if (s == "effusion") return SampleKind::effusion;
  if (s == "septal") return SampleKind::septal;
  throw ConfigError("unknown sample kind '" + std::string(s) + "'");
}

struct LabeledSample {
  std::string id;          // unique within a corpus, e.g. "p007/s03"
  std::string patient_id;  // grouping key
  SampleKind kind = SampleKind::normal;
  Tensor<float> image;     // (1, H, W), intensities in [0, 1]
  std::optional<LabelMap> label_map;  // (H, W); normals only
  std::uint64_t seed = 0;

  int disease_label() const { return kind == SampleKind::normal ? 0 : 1; }
};

}  // namespace segxfer
