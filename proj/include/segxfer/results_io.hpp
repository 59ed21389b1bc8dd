#pragma once

// CSV/TSV artifacts of the experiment harness and atomic file output.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "segxfer/experiments.hpp"
#include "segxfer/metrics.hpp"
#include "segxfer/tensor.hpp"

namespace segxfer {

/// Writes to a sibling temporary file, then renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& content) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << content;
    os.flush();
    if (!os) throw IoError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, sep)) out.push_back(cell);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline constexpr const char* kSweepHeader = "disease,mode,n_pos_train,repetition,tpr,tnr,kappa";

inline std::string record_key(const MetricsRecord& r) {
  return SweepKey{parse_sample_kind(r.disease), parse_feature_mode(r.mode), r.n_pos_train, r.repetition}.str();
}

/// Rows sorted by (disease, mode, n_pos_train, repetition).
inline std::string sweep_csv(std::vector<MetricsRecord> records) {
  std::sort(records.begin(), records.end(), [](const MetricsRecord& a, const MetricsRecord& b) {
    return std::tie(a.disease, a.mode, a.n_pos_train, a.repetition) <
           std::tie(b.disease, b.mode, b.n_pos_train, b.repetition);
  });
  std::string out = std::string(kSweepHeader) + "\n";
  for (const auto& r : records) {
    out += r.disease + "," + r.mode + "," + std::to_string(r.n_pos_train) + "," + std::to_string(r.repetition) + "," +
           format_double(r.tpr) + "," + format_double(r.tnr) + "," + format_double(r.kappa) + "\n";
  }
  return out;
}

inline std::vector<MetricsRecord> parse_sweep_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kSweepHeader) throw IoError("sweep CSV lacks the expected header");
  std::vector<MetricsRecord> out;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto c = split(line, ',');
    if (c.size() != 7) throw IoError("sweep CSV line " + std::to_string(lineno) + ": expected 7 columns");
    try {
      MetricsRecord r;
      r.disease = c[0];
      r.mode = c[1];
      parse_sample_kind(r.disease);
      parse_feature_mode(r.mode);
      r.n_pos_train = std::stoi(c[2]);
      r.repetition = std::stoi(c[3]);
      r.tpr = std::stod(c[4]);
      r.tnr = std::stod(c[5]);
      r.kappa = std::stod(c[6]);
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw IoError("sweep CSV line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<MetricsRecord> read_sweep_csv(const std::filesystem::path& path) {
  return parse_sweep_csv(read_file(path));
}

inline std::string predictions_tsv(std::span<const Prediction> preds) {
  std::string out = "sample_id\ttruth\tpredicted\tprob_positive\n";
  char buf[64];
  for (const auto& p : preds) {
    std::snprintf(buf, sizeof buf, "\t%d\t%d\t%.9g\n", p.truth, p.predicted, p.prob_positive);
    out += p.sample_id + buf;
  }
  return out;
}

inline std::vector<Prediction> parse_predictions_tsv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("sample_id\t", 0) != 0) throw IoError("predictions file lacks its header");
  std::vector<Prediction> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split(line, '\t');
    if (c.size() != 4) throw IoError("malformed predictions row: " + line);
    try {
      out.push_back({c[0], std::stoi(c[1]), std::stoi(c[2]), std::stod(c[3])});
    } catch (const std::exception&) {
      throw IoError("malformed predictions row: " + line);
    }
  }
  return out;
}

inline std::string dice_csv(std::span<const DiceRow> rows) {
  std::string out = "fold,n,label,dice\n";
  for (const auto& r : rows) {
    out += std::to_string(r.fold) + "," + std::to_string(r.n) + "," + kLabelNames[r.label] + "," +
           format_double(r.dice) + "\n";
  }
  return out;
}

inline std::vector<DiceRow> parse_dice_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "fold,n,label,dice") throw IoError("dice CSV lacks the expected header");
  std::vector<DiceRow> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = split(line, ',');
    if (c.size() != 4) throw IoError("malformed dice row: " + line);
    const auto* it = std::find(std::begin(kLabelNames), std::end(kLabelNames), c[2]);
    if (it == std::end(kLabelNames)) throw IoError("unknown label in dice row: " + line);
    try {
      out.push_back({std::stoi(c[0]), std::stoi(c[1]), static_cast<int>(it - std::begin(kLabelNames)), std::stod(c[3])});
    } catch (const std::exception&) {
      throw IoError("malformed dice row: " + line);
    }
  }
  return out;
}

}  // namespace segxfer
