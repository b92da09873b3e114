#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "unimatch/engine.hpp"

namespace unimatch {

namespace fs = std::filesystem;

/// Keeps freed activation buffers in the heap instead of returning them to
/// the OS; training reallocates the same sizes every step. Call once from main.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

/// $UNIMATCH_RUN_ROOT, or ./runs.
inline fs::path run_root() {
  const char* env = std::getenv("UNIMATCH_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

/// <parent>/<config hash>-<timestamp>, suffixed when the name is taken.
inline fs::path unique_run_dir(const fs::path& parent, const TrainConfig& cfg) {
  const std::string base = hex64(config_hash(cfg)) + "-" + utc_timestamp();
  fs::path p = parent / base;
  for (int i = 1; fs::exists(p); ++i) p = parent / (base + "-" + std::to_string(i));
  return p;
}

/// Hash prefix of a run directory name.
inline std::string run_dir_hash(const fs::path& dir) { return dir.filename().string().substr(0, 16); }

inline RunArtifacts run_training(const TrainConfig& cfg, const fs::path& dir, std::ostream* progress = nullptr) {
  if (auto errs = validate_config(cfg); !errs.empty()) {
    std::string msg = "invalid config:";
    for (const auto& e : errs) msg += "\n  " + e;
    throw ConfigError(msg);
  }
  const TrainData data = prepare_data(cfg);
  return train(cfg, data.manifest, data.train, data.eval, {dir, true, progress});
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Ablation axes

inline const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"tau", "lambda", "variant", "frozen", "dropout_position"};
  return axes;
}

inline std::vector<std::string> default_axis_values(const std::string& axis) {
  if (axis == "tau") return {"0", "0.7", "0.9", "0.95", "0.98"};
  if (axis == "lambda") return {"0.5", "1", "2", "4"};
  if (axis == "variant") return {"a", "b", "c", "v2"};
  if (axis == "frozen") return {"false", "true"};
  if (axis == "dropout_position") return {"encoder_decoder", "decoder_classifier"};
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

/// Config overrides selecting `value` on `axis`.
inline std::vector<std::string> axis_overrides(const std::string& axis, const std::string& value) {
  if (axis == "tau") return {"tau=" + value};
  if (axis == "lambda") return {"lambda_u=" + value};
  if (axis == "frozen") return {"freeze_encoder=" + value};
  if (axis == "dropout_position") return {"perturb.position=" + value};
  if (axis == "variant") {
    if (value == "a" || value == "b" || value == "c") return {"framework=variant_" + value};
    if (value == "v2") return {"framework=unimatch_v2"};
    if (value == "v1") return {"framework=unimatch_v1"};
    throw ConfigError("unknown variant '" + value + "'");
  }
  throw ConfigError("unknown ablation axis '" + axis + "'");
}

struct SummaryRow {
  std::string label;
  std::vector<double> teacher;  // one entry per seed
  std::vector<double> student;
  std::vector<std::string> run_dirs;

  double teacher_median() const { return median(teacher); }
  double student_median() const { return median(student); }
};

inline std::string format_table(const std::string& key, const std::vector<SummaryRow>& rows) {
  std::ostringstream os;
  os << "| " << key << " | teacher mIoU | student mIoU | runs |\n|---|---|---|---|\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "| %s | %.2f | %.2f | %zu |\n", r.label.c_str(), 100.0 * r.teacher_median(),
                  100.0 * r.student_median(), r.teacher.size());
    os << buf;
  }
  return os.str();
}

inline json summary_json(const std::string& kind, const std::string& key, const std::vector<SummaryRow>& rows) {
  json out{{"kind", kind}, {"key", key}, {"rows", json::array()}};
  for (const auto& r : rows)
    out["rows"].push_back({{key, r.label},
                           {"teacher_miou_median", r.teacher_median()},
                           {"student_miou_median", r.student_median()},
                           {"teacher_miou", r.teacher},
                           {"student_miou", r.student},
                           {"run_dirs", r.run_dirs}});
  return out;
}

inline void write_summary(const fs::path& dir, const json& summary, const std::string& table) {
  fs::create_directories(dir);
  std::ofstream(dir / "summary.json") << summary.dump(2) << "\n";
  std::ofstream(dir / "summary.md") << table;
}

/// Runs one training per (label, overrides) entry and seed.
inline std::vector<SummaryRow> run_grid(const json& base_doc, const std::vector<std::string>& base_overrides,
                                        const std::vector<std::pair<std::string, std::vector<std::string>>>& cells,
                                        const std::vector<std::uint64_t>& seeds, const fs::path& parent,
                                        std::ostream* progress) {
  // resolve every cell first so config errors surface before any training
  std::vector<std::vector<TrainConfig>> cfgs;
  for (const auto& [label, ov] : cells) {
    cfgs.emplace_back();
    for (auto seed : seeds) {
      auto all = base_overrides;
      all.insert(all.end(), ov.begin(), ov.end());
      all.push_back("seed=" + std::to_string(seed));
      TrainConfig c = resolve_config(base_doc, all);
      if (auto errs = validate_config(c); !errs.empty()) throw ConfigError(label + ": " + errs.front());
      cfgs.back().push_back(c);
    }
  }
  std::vector<SummaryRow> rows;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    SummaryRow row{cells[i].first, {}, {}, {}};
    for (const auto& c : cfgs[i]) {
      const fs::path dir = unique_run_dir(parent, c);
      if (progress) *progress << "[" << row.label << " seed " << c.seed << "] " << dir.string() << "\n";
      const RunArtifacts a = run_training(c, dir);
      row.teacher.push_back(a.final_teacher_miou);
      row.student.push_back(a.final_student_miou);
      row.run_dirs.push_back(fs::relative(dir, parent).string());
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace unimatch
