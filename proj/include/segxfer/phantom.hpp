#pragma once

// Synthetic four-chamber-style cardiac slices with six-label ground truth and
// two disease variants (pericardial-effusion-like and septal-defect-like).
//
// A virtual patient is a fixed geometry: a bright thorax disc on a dark
// background, four elliptical blood pools in two columns (right heart on the
// image left, ventricles on top), and a myocardial band around the pools that
// also forms the septum between left and right pools. Slices of one patient
// differ by a small affine jitter and a chamber-size modulation that mimics an
// axial sweep.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <queue>
#include <sstream>
#include <string>
#include <vector>

#include "segxfer/dataset.hpp"
#include "segxfer/rng.hpp"
#include "segxfer/tensor.hpp"
#include "segxfer/tensor_io.hpp"

namespace segxfer {

namespace intensity {
inline constexpr double background = 0.05;
inline constexpr double thorax = 0.35;
inline constexpr double fluid = 0.45;
inline constexpr double myocardium = 0.55;
inline constexpr double blood = 0.75;
}  // namespace intensity

enum class CorpusProfile { paper, desk };

struct CorpusConfig {
  CorpusProfile profile = CorpusProfile::desk;
  int size = 64;
  int patients = 20;
  int min_slices = 8;
  int max_slices = 12;
  int positives_per_disease = 30;
  std::uint64_t seed = 0;
  double noise_sigma = 0.03;
  double jitter_scale = 0.10;         // max relative scale difference between slices
  double jitter_rotation_deg = 10.0;  // max rotation difference between slices, degrees
  double jitter_translation = 0.05;   // max shift between slices, fraction of heart diameter
  double sweep_modulation = 0.12;     // chamber size change across the sweep
  double min_severity = 0.3;
  double max_severity = 1.0;

  /// 256x256, 40 patients, 9..12 slices (about 425 negatives), 30+30 positives.
  static CorpusConfig paper() {
    CorpusConfig c;
    c.profile = CorpusProfile::paper;
    c.size = 256;
    c.patients = 40;
    c.min_slices = 9;
    c.max_slices = 12;
    return c;
  }
  /// 64x64, 20 patients, 8..12 slices, 30+30 positives.
  static CorpusConfig desk() { return CorpusConfig{}; }
};

inline std::string_view to_string(CorpusProfile p) { return p == CorpusProfile::paper ? "paper" : "desk"; }

inline CorpusProfile parse_profile(std::string_view s) {
  if (s == "paper") return CorpusProfile::paper;
  if (s == "desk") return CorpusProfile::desk;
  throw ConfigError("unknown profile '" + std::string(s) + "'");
}

inline CorpusConfig corpus_config(CorpusProfile p) {
  return p == CorpusProfile::paper ? CorpusConfig::paper() : CorpusConfig::desk();
}

namespace phantom_detail {

struct Ellipse {
  double cu, cv, ru, rv;
};

// Pool layout in the heart frame (u to the patient's left, v downward), in
// units of the heart radius. Order matches Anatomy codes 1..4.
inline constexpr std::array<Ellipse, 4> kPools{{
    {-0.50, 0.62, 0.38, 0.30},   // RA
    {0.50, 0.62, 0.36, 0.28},    // LA
    {-0.50, -0.30, 0.40, 0.48},  // RV
    {0.50, -0.30, 0.40, 0.52},   // LV
}};
inline constexpr double kWall = 0.18;

struct PatientGeometry {
  double thorax_cx, thorax_cy, thorax_rx, thorax_ry;
  double heart_cx, heart_cy, heart_radius, heart_angle;
  std::array<Ellipse, 4> pools;
};

struct SliceTransform {
  double scale, angle, tx, ty, sweep;
};

inline PatientGeometry draw_patient(Rng& rng, int size) {
  const double s = size;
  PatientGeometry g{};
  g.thorax_cx = s * (0.5 + rng.uniform(-0.02, 0.02));
  g.thorax_cy = s * (0.5 + rng.uniform(-0.02, 0.02));
  g.thorax_rx = s * 0.45 * rng.uniform(0.95, 1.03);
  g.thorax_ry = s * 0.40 * rng.uniform(0.95, 1.03);
  g.heart_radius = s * 0.27 * rng.uniform(0.92, 1.05);
  g.heart_cx = g.thorax_cx + s * rng.uniform(-0.03, 0.03);
  g.heart_cy = g.thorax_cy + s * rng.uniform(-0.02, 0.02);
  g.heart_angle = rng.uniform(-15.0, 15.0) * std::numbers::pi / 180.0;
  for (std::size_t i = 0; i < 4; ++i) {
    Ellipse e = kPools[i];
    e.ru *= rng.uniform(0.9, 1.1);
    e.rv *= rng.uniform(0.9, 1.1);
    g.pools[i] = e;
  }
  return g;
}

inline bool inside(const Ellipse& e, double u, double v, double grow = 0.0) {
  const double du = (u - e.cu) / (e.ru + grow), dv = (v - e.cv) / (e.rv + grow);
  return du * du + dv * dv <= 1.0;
}

/// Noise-free intensities and labels of one slice.
inline void render(const PatientGeometry& g, const SliceTransform& t, int size, std::vector<double>& clean,
                   LabelMap& labels) {
  const double c = size / 2.0;
  const double ca = std::cos(-t.angle), sa = std::sin(-t.angle);
  const double ha = std::cos(-g.heart_angle), hs = std::sin(-g.heart_angle);
  std::array<Ellipse, 4> pools = g.pools;
  for (std::size_t i = 0; i < 4; ++i) {
    // Atria (0,1) shrink while ventricles (2,3) grow along the sweep.
    const double f = 1.0 + (i < 2 ? -t.sweep : t.sweep);
    pools[i].ru *= f;
    pools[i].rv *= f;
  }
  clean.assign(static_cast<std::size_t>(size * size), intensity::background);
  labels = LabelMap({static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      // Undo the slice jitter about the image centre.
      const double dx = x + 0.5 - c - t.tx, dy = y + 0.5 - c - t.ty;
      const double px = c + (ca * dx - sa * dy) / t.scale;
      const double py = c + (sa * dx + ca * dy) / t.scale;
      const std::size_t idx = static_cast<std::size_t>(y * size + x);
      const double tdx = (px - g.thorax_cx) / g.thorax_rx, tdy = (py - g.thorax_cy) / g.thorax_ry;
      if (tdx * tdx + tdy * tdy <= 1.0) clean[idx] = intensity::thorax;
      const double hx = px - g.heart_cx, hy = py - g.heart_cy;
      const double u = (ha * hx - hs * hy) / g.heart_radius;
      const double v = (hs * hx + ha * hy) / g.heart_radius;
      Anatomy label = Anatomy::background;
      for (std::size_t i = 0; i < 4; ++i) {
        if (inside(pools[i], u, v)) {
          label = static_cast<Anatomy>(i + 1);
          break;
        }
      }
      if (label == Anatomy::background) {
        for (const auto& e : pools) {
          if (inside(e, u, v, kWall)) {
            label = Anatomy::myocardium;
            break;
          }
        }
      }
      labels[idx] = static_cast<std::uint8_t>(label);
      if (label == Anatomy::myocardium) clean[idx] = intensity::myocardium;
      else if (label != Anatomy::background) clean[idx] = intensity::blood;
    }
  }
}

inline float noisy(double value, double sigma, Rng& rng) {
  return static_cast<float>(std::clamp(value + sigma * rng.normal(), 0.0, 1.0));
}

inline void check_severity(double severity) {
  if (!(severity >= 0.3 && severity <= 1.0)) {
    throw ConfigError("disease severity must lie in [0.3, 1], got " + std::to_string(severity));
  }
}

inline void check_normal(const LabeledSample& s) {
  if (s.kind != SampleKind::normal || !s.label_map) {
    throw UsageError("disease edits apply to normal samples with a label map");
  }
}

struct HeartExtent {
  double cx = 0, cy = 0, diameter = 0;
};

inline HeartExtent heart_extent(const LabelMap& labels) {
  const std::size_t h = labels.dim(0), w = labels.dim(1);
  HeartExtent e;
  double count = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (labels[y * w + x] == 0) continue;
      e.cx += x + 0.5;
      e.cy += y + 0.5;
      count += 1;
    }
  }
  if (count == 0) throw UsageError("label map contains no heart");
  e.cx /= count;
  e.cy /= count;
  e.diameter = 2.0 * std::sqrt(count / std::numbers::pi);
  return e;
}

}  // namespace phantom_detail

/// Slice count of a patient, drawn from the patient's own stream.
inline int patient_slice_count(const CorpusConfig& config, int patient_index) {
  Rng rng(derive_seed({config.seed, 0x70617469ULL, static_cast<std::uint64_t>(patient_index), 1}));
  return config.min_slices + static_cast<int>(rng.index(static_cast<std::size_t>(config.max_slices - config.min_slices + 1)));
}

inline std::string patient_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "p%03d", index);
  return buf;
}

/// Renders `slices` normal slices of the patient keyed by `patient_seed`.
inline std::vector<LabeledSample> generate_patient(std::uint64_t patient_seed, const CorpusConfig& config,
                                                   int slices, const std::string& patient_id) {
  using namespace phantom_detail;
  if (config.size < 16 || config.size % 16) throw ConfigError("phantom size must be a positive multiple of 16");
  Rng geo_rng(derive_seed({patient_seed, 0x67656fULL}));
  const PatientGeometry geometry = draw_patient(geo_rng, config.size);
  std::vector<LabeledSample> out;
  for (int s = 0; s < slices; ++s) {
    const std::uint64_t slice_seed = derive_seed({patient_seed, 0x736c6963ULL, static_cast<std::uint64_t>(s)});
    Rng rng(slice_seed);
    const double diameter = 2.0 * geometry.heart_radius;
    // Each slice draws half the range, so any two slices differ by at most
    // the configured jitter.
    auto half = [&](double bound) { return rng.uniform(-bound / 2, bound / 2); };
    SliceTransform t{};
    t.scale = 1.0 + half(config.jitter_scale);
    t.angle = half(config.jitter_rotation_deg) * std::numbers::pi / 180.0;
    t.tx = diameter * half(config.jitter_translation);
    t.ty = diameter * half(config.jitter_translation);
    t.sweep = slices > 1 ? config.sweep_modulation * (static_cast<double>(s) / (slices - 1) - 0.5) : 0.0;
    std::vector<double> clean;
    LabelMap labels;
    render(geometry, t, config.size, clean, labels);
    Tensor<float> image({1, static_cast<std::size_t>(config.size), static_cast<std::size_t>(config.size)});
    for (std::size_t i = 0; i < clean.size(); ++i) image[i] = noisy(clean[i], config.noise_sigma, rng);
    char sid[16];
    std::snprintf(sid, sizeof sid, "s%02d", s);
    out.push_back({patient_id + "/" + sid, patient_id, SampleKind::normal, std::move(image), std::move(labels),
                   slice_seed});
  }
  return out;
}

/// Adds a crescent of fluid-like intensity just outside the heart boundary.
/// The arc covers 40-90% of the circumference and the band is 3-8% of the
/// heart diameter thick, both growing linearly with severity.
inline LabeledSample apply_effusion(const LabeledSample& normal, std::uint64_t seed, double severity,
                                    double noise_sigma = 0.03) {
  using namespace phantom_detail;
  check_severity(severity);
  check_normal(normal);
  const LabelMap& labels = *normal.label_map;
  const std::size_t h = labels.dim(0), w = labels.dim(1);
  const HeartExtent heart = heart_extent(labels);
  const double s01 = (severity - 0.3) / 0.7;
  const double arc = 0.4 + 0.5 * s01;
  const double thickness = std::max(1.0, (0.03 + 0.05 * s01) * heart.diameter);
  Rng rng(seed);
  const double centre_angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const double half_span = arc * std::numbers::pi;

  // Distance band around the heart: stamp discs on heart boundary pixels.
  std::vector<std::uint8_t> band(h * w, 0);
  const int r = static_cast<int>(std::ceil(thickness));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (labels[y * w + x] == 0) continue;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          if (dx * dx + dy * dy > thickness * thickness) continue;
          const auto yy = static_cast<std::ptrdiff_t>(y) + dy, xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(h) || xx >= static_cast<std::ptrdiff_t>(w)) continue;
          band[static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)] = 1;
        }
      }
    }
  }
  LabeledSample out = normal;
  out.kind = SampleKind::effusion;
  out.label_map.reset();
  out.seed = seed;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t idx = y * w + x;
      if (!band[idx] || labels[idx] != 0) continue;
      const double ang = std::atan2(y + 0.5 - heart.cy, x + 0.5 - heart.cx);
      double diff = std::remainder(ang - centre_angle, 2.0 * std::numbers::pi);
      if (std::abs(diff) > half_span) continue;
      out.image[idx] = noisy(intensity::fluid, noise_sigma, rng);
    }
  }
  return out;
}

struct SeptalEdit {
  Anatomy left_pool;   // pool on the image left of the septum
  Anatomy right_pool;
  std::vector<std::size_t> pixels;  // flat indices set to blood intensity
};

/// Opens a gap in the septum between the atria or the ventricles (chosen at
/// random) and fills it with blood-pool intensity. Gap width is 2-8% of the
/// heart diameter, at least 1.5 pixels.
inline LabeledSample apply_septal_defect(const LabeledSample& normal, std::uint64_t seed, double severity,
                                         double noise_sigma = 0.03, SeptalEdit* edit = nullptr) {
  using namespace phantom_detail;
  check_severity(severity);
  check_normal(normal);
  const LabelMap& labels = *normal.label_map;
  const std::size_t h = labels.dim(0), w = labels.dim(1);
  const HeartExtent heart = heart_extent(labels);
  Rng rng(seed);
  const bool atria = rng.uniform() < 0.5;
  const auto a_label = static_cast<std::uint8_t>(atria ? Anatomy::right_atrium : Anatomy::right_ventricle);
  const auto b_label = static_cast<std::uint8_t>(atria ? Anatomy::left_atrium : Anatomy::left_ventricle);

  double ax = 0, ay = 0, an = 0, bx = 0, by = 0, bn = 0;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto l = labels[y * w + x];
      if (l == a_label) ax += x + 0.5, ay += y + 0.5, an += 1;
      if (l == b_label) bx += x + 0.5, by += y + 0.5, bn += 1;
    }
  }
  if (an == 0 || bn == 0) throw UsageError("septal defect needs both pools of the chosen pair");
  ax /= an, ay /= an, bx /= bn, by /= bn;
  const double len = std::hypot(bx - ax, by - ay);
  const double dx = (bx - ax) / len, dy = (by - ay) / len;  // across the septum
  const double ex = -dy, ey = dx;                           // along the septum
  const double mx = (ax + bx) / 2, my = (ay + by) / 2;

  // Extent of each pool along the septum direction; the gap is placed inside
  // the central 60% of their overlap.
  double a_lo = 1e9, a_hi = -1e9, b_lo = 1e9, b_hi = -1e9;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto l = labels[y * w + x];
      if (l != a_label && l != b_label) continue;
      const double e = (x + 0.5 - mx) * ex + (y + 0.5 - my) * ey;
      if (l == a_label) a_lo = std::min(a_lo, e), a_hi = std::max(a_hi, e);
      else b_lo = std::min(b_lo, e), b_hi = std::max(b_hi, e);
    }
  }
  const double lo = std::max(a_lo, b_lo), hi = std::min(a_hi, b_hi);
  const double centre = (lo + hi) / 2 + 0.3 * (hi - lo) * rng.uniform(-1.0, 1.0);
  const double s01 = (severity - 0.3) / 0.7;
  const double width = std::max(1.5, (0.02 + 0.06 * s01) * heart.diameter);

  // Inner edges of the pools across the gap line.
  double a_edge = -1e9, b_edge = 1e9;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto l = labels[y * w + x];
      if (l != a_label && l != b_label) continue;
      const double e = (x + 0.5 - mx) * ex + (y + 0.5 - my) * ey;
      if (std::abs(e - centre) > width / 2) continue;
      const double d = (x + 0.5 - mx) * dx + (y + 0.5 - my) * dy;
      if (l == a_label) a_edge = std::max(a_edge, d);
      else b_edge = std::min(b_edge, d);
    }
  }

  LabeledSample out = normal;
  out.kind = SampleKind::septal;
  out.label_map.reset();
  out.seed = seed;
  SeptalEdit local{static_cast<Anatomy>(a_label), static_cast<Anatomy>(b_label), {}};
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t idx = y * w + x;
      if (labels[idx] != static_cast<std::uint8_t>(Anatomy::myocardium)) continue;
      const double e = (x + 0.5 - mx) * ex + (y + 0.5 - my) * ey;
      const double d = (x + 0.5 - mx) * dx + (y + 0.5 - my) * dy;
      if (std::abs(e - centre) > width / 2 || d < a_edge - 1.0 || d > b_edge + 1.0) continue;
      out.image[idx] = noisy(intensity::blood, noise_sigma, rng);
      local.pixels.push_back(idx);
    }
  }
  if (edit) *edit = std::move(local);
  return out;
}

struct Corpus {
  std::vector<LabeledSample> normals;
  std::vector<LabeledSample> effusion;
  std::vector<LabeledSample> septal;

  const std::vector<LabeledSample>& positives(SampleKind kind) const {
    if (kind == SampleKind::effusion) return effusion;
    if (kind == SampleKind::septal) return septal;
    throw UsageError("normal samples are not positives");
  }

  std::vector<std::string> patient_ids() const {
    std::vector<std::string> ids;
    for (const auto& s : normals) {
      if (ids.empty() || ids.back() != s.patient_id) ids.push_back(s.patient_id);
    }
    return ids;
  }
};

/// Source slice for the i-th positive of a disease: a fresh virtual patient
/// that never contributes normal slices.
inline LabeledSample positive_source(const CorpusConfig& config, SampleKind kind, int index) {
  const std::uint64_t k = kind == SampleKind::effusion ? 1 : 2;
  const std::uint64_t seed = derive_seed({config.seed, 0x706f73ULL, k, static_cast<std::uint64_t>(index)});
  Rng rng(derive_seed({seed, 0x6e756dULL}));
  const int slices = config.min_slices + static_cast<int>(rng.index(static_cast<std::size_t>(config.max_slices - config.min_slices + 1)));
  char pid[32];
  std::snprintf(pid, sizeof pid, "%s%03d", kind == SampleKind::effusion ? "eff" : "sep", index);
  auto slices_out = generate_patient(seed, config, slices, pid);
  return std::move(slices_out[rng.index(slices_out.size())]);
}

inline Corpus generate_corpus(const CorpusConfig& config) {
  if (config.patients < 1 || config.min_slices < 1 || config.max_slices < config.min_slices) {
    throw ConfigError("invalid corpus counts");
  }
  Corpus corpus;
  for (int p = 0; p < config.patients; ++p) {
    const std::uint64_t seed = derive_seed({config.seed, 0x70617469ULL, static_cast<std::uint64_t>(p)});
    auto slices = generate_patient(seed, config, patient_slice_count(config, p), patient_name(p));
    for (auto& s : slices) corpus.normals.push_back(std::move(s));
  }
  for (SampleKind kind : {SampleKind::effusion, SampleKind::septal}) {
    auto& dst = kind == SampleKind::effusion ? corpus.effusion : corpus.septal;
    for (int i = 0; i < config.positives_per_disease; ++i) {
      LabeledSample src = positive_source(config, kind, i);
      const std::uint64_t k = kind == SampleKind::effusion ? 1 : 2;
      const std::uint64_t dseed = derive_seed({config.seed, 0x646973ULL, k, static_cast<std::uint64_t>(i)});
      const double severity = Rng(dseed).uniform(config.min_severity, config.max_severity);
      LabeledSample pos = kind == SampleKind::effusion
                              ? apply_effusion(src, dseed, severity, config.noise_sigma)
                              : apply_septal_defect(src, dseed, severity, config.noise_sigma);
      char id[48];
      std::snprintf(id, sizeof id, "positives/%s/%03d", std::string(to_string(kind)).c_str(), i);
      pos.id = id;
      dst.push_back(std::move(pos));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   <root>/manifest.tsv   path, patient_id, kind, has_labelmap
//   <root>/<patient>/<slice>.img.tnsr and .lbl.tnsr for normals
//   <root>/positives/<kind>/<id>.img.tnsr for positives

inline void write_corpus(const Corpus& corpus, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  std::ostringstream manifest;
  manifest << "path\tpatient_id\tkind\thas_labelmap\n";
  auto emit = [&](const LabeledSample& s) {
    const fs::path img = root / (s.id + ".img.tnsr");
    fs::create_directories(img.parent_path(), ec);
    if (ec) throw IoError("cannot create " + img.parent_path().string());
    save_tensor(img, s.image);
    if (s.label_map) save_tensor(root / (s.id + ".lbl.tnsr"), *s.label_map);
    manifest << s.id << ".img.tnsr\t" << s.patient_id << '\t' << to_string(s.kind) << '\t'
             << (s.label_map ? 1 : 0) << '\n';
  };
  for (const auto& s : corpus.normals) emit(s);
  for (const auto& s : corpus.effusion) emit(s);
  for (const auto& s : corpus.septal) emit(s);
  std::ofstream os(root / "manifest.tsv", std::ios::binary);
  if (!os) throw IoError("cannot write manifest in " + root.string());
  os << manifest.str();
  if (!os) throw IoError("failed writing manifest");
}

inline Corpus read_corpus(const std::filesystem::path& root) {
  std::ifstream is(root / "manifest.tsv");
  if (!is) throw IoError("no manifest.tsv under " + root.string());
  std::string line;
  if (!std::getline(is, line) || line.rfind("path\t", 0) != 0) throw IoError("manifest.tsv lacks its header");
  Corpus corpus;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string path, patient, kind, has_lbl;
    if (!std::getline(row, path, '\t') || !std::getline(row, patient, '\t') || !std::getline(row, kind, '\t') ||
        !std::getline(row, has_lbl, '\t')) {
      throw IoError("malformed manifest row: " + line);
    }
    const std::string suffix = ".img.tnsr";
    if (path.size() <= suffix.size() || path.compare(path.size() - suffix.size(), suffix.size(), suffix) != 0) {
      throw IoError("manifest path is not an image tensor: " + path);
    }
    LabeledSample s;
    s.id = path.substr(0, path.size() - suffix.size());
    s.patient_id = patient;
    try {
      s.kind = parse_sample_kind(kind);
    } catch (const ConfigError& e) {
      throw IoError(e.what());
    }
    s.image = load_tensor<float>(root / path);
    if (has_lbl == "1") s.label_map = load_tensor<std::uint8_t>(root / (s.id + ".lbl.tnsr"));
    switch (s.kind) {
      case SampleKind::normal: corpus.normals.push_back(std::move(s)); break;
      case SampleKind::effusion: corpus.effusion.push_back(std::move(s)); break;
      case SampleKind::septal: corpus.septal.push_back(std::move(s)); break;
    }
  }
  return corpus;
}

}  // namespace segxfer
