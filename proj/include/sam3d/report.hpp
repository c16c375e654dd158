#pragma once

// Ablation report over a directory of finished runs. Each run directory holds
// run.json plus the CSVs its subcommand wrote; every report number is read
// back from those CSVs. Cells without a matching run are listed as missing.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "train.hpp"

namespace sam3d {

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct RunInfo {
  std::string name;  // directory name under the runs root
  std::filesystem::path dir;
  int stage = 0;  // 0 = untrained encoder (scratch)
  std::string tokenizer;
  bool reweight = true;
};

struct ReportRow {
  std::string cell;  // e.g. sam/reweight-on/stage2-off
  std::string tokenizer;
  std::string reweight;  // on | off | - (scratch)
  std::string stage2;    // on | off | -
  std::string run;       // empty when missing
  double probe_accuracy = kMissing;
  double purity = kMissing;
  double tail_cosine = kMissing;
  double L_distill = kMissing;
  double L_ins = kMissing;
  double L_token = kMissing;
  double L_final = kMissing;
  std::vector<std::string> absent;  // files the run did not produce

  std::string status() const {
    if (run.empty()) return "missing";
    if (absent.empty()) return "ok";
    std::string s = "incomplete:";
    for (std::size_t i = 0; i < absent.size(); ++i) s += (i ? "+" : "") + absent[i];
    return s;
  }
};

inline std::vector<RunInfo> scan_runs(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) {
    throw FormatError(FormatErrorKind::io, root.string() + ": not a directory");
  }
  std::vector<RunInfo> runs;
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    const auto path = e.path() / "run.json";
    if (!e.is_directory() || !std::filesystem::exists(path)) continue;
    const auto j = read_json_file(path);
    RunInfo r;
    r.name = e.path().filename().string();
    r.dir = e.path();
    r.stage = json_field<int>(j, "stage", path);
    r.tokenizer = json_field<nlohmann::json>(j, "tokenizer", path).value("mode", std::string("sam"));
    r.reweight = j.value("reweight", true);
    runs.push_back(r);
  }
  std::sort(runs.begin(), runs.end(), [](const RunInfo& a, const RunInfo& b) { return a.name < b.name; });
  return runs;
}

namespace detail {

inline double column_mean(const CsvTable& t, const std::string& col, const std::string& filter_col = {}) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    if (!filter_col.empty() && t.number(i, filter_col) == 0) continue;
    s += t.number(i, col);
    ++n;
  }
  return n ? s / static_cast<double>(n) : kMissing;
}

inline void fill_row(ReportRow& row, const RunInfo& run) {
  row.run = run.name;
  auto table = [&](const char* file) -> std::optional<CsvTable> {
    if (!std::filesystem::exists(run.dir / file)) {
      row.absent.emplace_back(file);
      return std::nullopt;
    }
    return read_csv(run.dir / file);
  };
  if (auto t = table("probe.csv")) {
    for (std::size_t i = 0; i < t->rows.size(); ++i) {
      if (t->rows[i].at(t->column("label")) == "all") row.probe_accuracy = t->number(i, "accuracy");
    }
  }
  if (auto t = table("purity.csv")) row.purity = column_mean(*t, "purity");
  if (run.stage == 0) return;
  if (auto t = table("eval.csv")) row.tail_cosine = column_mean(*t, "cosine", "tail");
  if (auto t = table("metrics.csv"); t && !t->rows.empty()) {
    const std::size_t last = t->rows.size() - 1;
    auto last_value = [&](const char* col) {
      return std::find(t->header.begin(), t->header.end(), col) == t->header.end() ? kMissing : t->number(last, col);
    };
    row.L_distill = last_value("L_distill");
    row.L_ins = last_value("L_ins");
    row.L_token = last_value("L_token");
    row.L_final = last_value("L_final");
  }
}

}  // namespace detail

// Eight matrix cells (tokenizer x reweight x stage2) followed by the scratch
// row. The first run (by directory name) matching a cell fills it.
inline std::vector<ReportRow> build_report(const std::vector<RunInfo>& runs) {
  std::vector<ReportRow> rows;
  for (const char* tok : {"sam", "knn"}) {
    for (bool rw : {true, false}) {
      for (bool s2 : {false, true}) {
        ReportRow row;
        row.tokenizer = tok;
        row.reweight = rw ? "on" : "off";
        row.stage2 = s2 ? "on" : "off";
        row.cell = row.tokenizer + "/reweight-" + row.reweight + "/stage2-" + row.stage2;
        for (const auto& r : runs) {
          if (r.stage == (s2 ? 2 : 1) && r.tokenizer == tok && r.reweight == rw) {
            detail::fill_row(row, r);
            break;
          }
        }
        rows.push_back(row);
      }
    }
  }
  ReportRow scratch;
  scratch.cell = "scratch";
  scratch.reweight = scratch.stage2 = "-";
  for (const auto& r : runs) {
    if (r.stage == 0) {
      scratch.tokenizer = r.tokenizer;
      detail::fill_row(scratch, r);
      break;
    }
  }
  rows.push_back(scratch);
  return rows;
}

inline std::string report_cell(double v) { return std::isnan(v) ? "" : fmt_double(v); }

inline void write_report_csv(const std::filesystem::path& path, const std::vector<ReportRow>& rows) {
  std::ofstream f(path);
  if (!f) throw FormatError(FormatErrorKind::io, "cannot write " + path.string());
  f << "cell,tokenizer,reweight,stage2,run,status,probe_accuracy,purity,tail_cosine,L_distill,L_ins,L_token,"
       "L_final\n";
  for (const auto& r : rows) {
    f << r.cell << ',' << r.tokenizer << ',' << r.reweight << ',' << r.stage2 << ',' << r.run << ',' << r.status()
      << ',' << report_cell(r.probe_accuracy) << ',' << report_cell(r.purity) << ',' << report_cell(r.tail_cosine)
      << ',' << report_cell(r.L_distill) << ',' << report_cell(r.L_ins) << ',' << report_cell(r.L_token) << ','
      << report_cell(r.L_final) << '\n';
  }
}

inline std::string report_summary(const std::vector<ReportRow>& rows) {
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return std::string(buf);
  };
  auto loss = [](double v) {
    if (std::isnan(v)) return std::string("-");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3e", v);
    return std::string(buf);
  };
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-28s %-8s %-8s %-8s %-10s %-10s %s\n", "cell", "probe", "purity", "tail_cos",
                "L_distill", "L_final", "status");
  out << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-28s %-8s %-8s %-8s %-10s %-10s %s\n", r.cell.c_str(),
                  num(r.probe_accuracy).c_str(), num(r.purity).c_str(), num(r.tail_cosine).c_str(),
                  loss(r.L_distill).c_str(), loss(r.L_final).c_str(), r.status().c_str());
    out << line;
  }
  std::size_t missing = 0;
  for (const auto& r : rows) missing += r.run.empty();
  out << missing << " of " << rows.size() << " cells missing\n";
  return out.str();
}

}  // namespace sam3d
