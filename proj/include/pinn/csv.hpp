#pragma once

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <pinn/config.hpp>
#include <pinn/ode.hpp>
#include <pinn/trainer.hpp>

namespace pinn {

// Malformed tabular input, reported with the 1-based line it came from.
struct CsvError : std::runtime_error {
  int line;  // 0 when the problem is not tied to a specific line
  CsvError(const std::string& path, int line_no, const std::string& message)
      : std::runtime_error(path + (line_no > 0 ? " line " + std::to_string(line_no)
                                               : std::string()) +
                           ": " + message),
        line(line_no) {}
};

// Bundle layout shared by the fit and verify front-ends.
inline constexpr const char* kBandsFile = "bands.csv";
inline constexpr const char* kSummaryFile = "summary.json";
inline constexpr const char* kConfigEchoFile = "config.json";
inline constexpr const char* kObservationsEchoFile = "observations.csv";
inline constexpr const char* kReportFile = "verification.json";

namespace detail {

// All CSV numbers carry 9 significant digits: parsing such a field and
// printing it again reproduces the same text, so emitted files round-trip.
inline std::string fmt9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
}

inline double numeric_field(const std::string& field, const std::string& path,
                            int line_no) {
  std::size_t consumed = 0;
  double v = 0.0;
  try {
    v = std::stod(field, &consumed);
  } catch (const std::exception&) {
    throw CsvError(path, line_no, "non-numeric field '" + field + "'");
  }
  if (consumed != field.size())
    throw CsvError(path, line_no, "non-numeric field '" + field + "'");
  return v;
}

// Lines of a text file with trailing CR tolerated and the final unterminated
// line kept; the header is checked against `expected` verbatim.
inline std::vector<std::string> read_lines_checked(const std::string& path,
                                                   const std::string& expected_header) {
  std::ifstream in(path);
  if (!in) throw CsvError(path, 0, "cannot open file");
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  while (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty()) throw CsvError(path, 0, "empty file");
  if (lines.front() != expected_header)
    throw CsvError(path, 1,
                   "wrong header '" + lines.front() + "', expected '" +
                       expected_header + "'");
  if (lines.size() == 1) throw CsvError(path, 0, "no data rows");
  return lines;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Observation series: `day,total_volume`
// ---------------------------------------------------------------------------

struct ObservationSeries {
  std::vector<double> days;
  std::vector<double> totals;
};

inline ObservationSeries read_observation_series(const std::string& path) {
  const auto lines = detail::read_lines_checked(path, "day,total_volume");
  ObservationSeries s;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    const auto fields = detail::split_fields(lines[i]);
    if (fields.size() != 2)
      throw CsvError(path, line_no,
                     "expected 2 fields, got " + std::to_string(fields.size()));
    const double day = detail::numeric_field(fields[0], path, line_no);
    const double total = detail::numeric_field(fields[1], path, line_no);
    if (!s.days.empty() && !(day > s.days.back()))
      throw CsvError(path, line_no, "days out of order (" + fields[0] +
                                        " after " + detail::fmt9(s.days.back()) + ")");
    if (!(total > 0.0))
      throw CsvError(path, line_no, "total volume must be positive");
    s.days.push_back(day);
    s.totals.push_back(total);
  }
  return s;
}

inline void write_observation_series(const std::string& path,
                                     const ObservationSeries& s) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError(path, 0, "cannot open file for writing");
  out << "day,total_volume\n";
  for (std::size_t i = 0; i < s.days.size(); ++i)
    out << detail::fmt9(s.days[i]) << ',' << detail::fmt9(s.totals[i]) << '\n';
}

// ---------------------------------------------------------------------------
// Trajectories: `t,C,T,M,G,s_MT`
// ---------------------------------------------------------------------------

inline void write_trajectory_csv(const std::string& path, const Trajectory& traj) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError(path, 0, "cannot open file for writing");
  out << "t,C,T,M,G,s_MT\n";
  for (std::size_t i = 0; i < traj.t.size(); ++i) {
    const SystemState& s = traj.states[i];
    out << detail::fmt9(traj.t[i]) << ',' << detail::fmt9(s.C) << ','
        << detail::fmt9(s.T) << ',' << detail::fmt9(s.M) << ',' << detail::fmt9(s.G)
        << ',' << detail::fmt9(traj.s_mt[i]) << '\n';
  }
}

inline Trajectory read_trajectory_csv(const std::string& path) {
  const auto lines = detail::read_lines_checked(path, "t,C,T,M,G,s_MT");
  Trajectory traj;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    const auto fields = detail::split_fields(lines[i]);
    if (fields.size() != 6)
      throw CsvError(path, line_no,
                     "expected 6 fields, got " + std::to_string(fields.size()));
    std::array<double, 6> v{};
    for (std::size_t k = 0; k < 6; ++k)
      v[k] = detail::numeric_field(fields[k], path, line_no);
    if (!traj.t.empty() && !(v[0] > traj.t.back()))
      throw CsvError(path, line_no, "time out of order");
    traj.t.push_back(v[0]);
    traj.states.push_back({v[1], v[2], v[3], v[4]});
    traj.s_mt.push_back(v[5]);
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Loss history: `epoch,L_r,L_d,L_IC,L_bc,w_r,w_d,w_IC,w_bc,total`
// ---------------------------------------------------------------------------

inline void write_history_csv(const std::string& path, const TrainingRun& run) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError(path, 0, "cannot open file for writing");
  out << "epoch,L_r,L_d,L_IC,L_bc,w_r,w_d,w_IC,w_bc,total\n";
  for (std::size_t i = 0; i < run.history.size(); ++i) {
    const LossBreakdown& b = run.history[i];
    out << run.history_epochs[i] << ',' << detail::fmt9(b.L_r) << ','
        << detail::fmt9(b.L_d) << ',' << detail::fmt9(b.L_IC) << ','
        << detail::fmt9(b.L_bc) << ',' << detail::fmt9(b.w_r) << ','
        << detail::fmt9(b.w_d) << ',' << detail::fmt9(b.w_IC) << ','
        << detail::fmt9(b.w_bc) << ',' << detail::fmt9(b.total) << '\n';
  }
}

struct HistorySeries {
  std::vector<int> epochs;
  std::vector<LossBreakdown> rows;
};

inline HistorySeries read_history_csv(const std::string& path) {
  const auto lines =
      detail::read_lines_checked(path, "epoch,L_r,L_d,L_IC,L_bc,w_r,w_d,w_IC,w_bc,total");
  HistorySeries h;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    const auto fields = detail::split_fields(lines[i]);
    if (fields.size() != 10)
      throw CsvError(path, line_no,
                     "expected 10 fields, got " + std::to_string(fields.size()));
    std::array<double, 10> v{};
    for (std::size_t k = 0; k < 10; ++k)
      v[k] = detail::numeric_field(fields[k], path, line_no);
    h.epochs.push_back(static_cast<int>(v[0]));
    LossBreakdown b;
    b.L_r = v[1]; b.L_d = v[2]; b.L_IC = v[3]; b.L_bc = v[4];
    b.w_r = v[5]; b.w_d = v[6]; b.w_IC = v[7]; b.w_bc = v[8];
    b.total = v[9];
    h.rows.push_back(b);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Ensemble bands: t plus mean/lower/upper per quantity (lower/upper = ±1 std)
// ---------------------------------------------------------------------------

inline constexpr const char* kBandsHeader =
    "t,C_mean,C_lower,C_upper,T_mean,T_lower,T_upper,M_mean,M_lower,M_upper,"
    "G_mean,G_lower,G_upper,s_MT_mean,s_MT_lower,s_MT_upper";

inline void write_bands_csv(const std::string& path, const EnsembleResult& res) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError(path, 0, "cannot open file for writing");
  out << kBandsHeader << '\n';
  for (std::size_t i = 0; i < res.t_grid.size(); ++i) {
    const auto col = static_cast<Eigen::Index>(i);
    out << detail::fmt9(res.t_grid[i]);
    for (Eigen::Index q = 0; q < 5; ++q) {
      const double m = res.mean(q, col), s = res.stdev(q, col);
      out << ',' << detail::fmt9(m) << ',' << detail::fmt9(m - s) << ','
          << detail::fmt9(m + s);
    }
    out << '\n';
  }
}

struct BandSeries {
  std::vector<double> t;
  Eigen::MatrixXd mean, lower, upper;  // 5 x n: C, T, M, G, s_MT
};

inline BandSeries read_bands_csv(const std::string& path) {
  const auto lines = detail::read_lines_checked(path, kBandsHeader);
  const auto n = static_cast<Eigen::Index>(lines.size() - 1);
  BandSeries b;
  b.mean.resize(5, n);
  b.lower.resize(5, n);
  b.upper.resize(5, n);
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    const auto fields = detail::split_fields(lines[i]);
    if (fields.size() != 16)
      throw CsvError(path, line_no,
                     "expected 16 fields, got " + std::to_string(fields.size()));
    std::array<double, 16> v{};
    for (std::size_t k = 0; k < 16; ++k)
      v[k] = detail::numeric_field(fields[k], path, line_no);
    if (!b.t.empty() && !(v[0] > b.t.back()))
      throw CsvError(path, line_no, "time out of order");
    b.t.push_back(v[0]);
    const auto col = static_cast<Eigen::Index>(i) - 1;
    for (Eigen::Index q = 0; q < 5; ++q) {
      b.mean(q, col) = v[1 + 3 * static_cast<std::size_t>(q)];
      b.lower(q, col) = v[2 + 3 * static_cast<std::size_t>(q)];
      b.upper(q, col) = v[3 + 3 * static_cast<std::size_t>(q)];
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Machine-readable run summary
// ---------------------------------------------------------------------------

inline nlohmann::json make_summary(const EnsembleResult& res, const RunConfig& config) {
  nlohmann::json per_seed;
  for (std::size_t i = 0; i < res.runs.size(); ++i) {
    const LossBreakdown& b = res.runs[i].final_losses;
    per_seed[std::to_string(res.seeds[i])] = {
        {"L_r", b.L_r}, {"L_d", b.L_d},   {"L_IC", b.L_IC},
        {"L_bc", b.L_bc}, {"total", b.total}};
  }
  nlohmann::json constants;
  for (std::size_t r = 0; r < kRateCount; ++r) {
    double mean_value = 0.0;
    for (const TrainingRun& run : res.runs) mean_value += run.rate_values[r];
    mean_value /= static_cast<double>(res.runs.size());
    constants[kRateNames[r]] = {{"value", mean_value},
                                {"trainable", config.rates.trainable[r]}};
  }
  char hash_text[19];
  std::snprintf(hash_text, sizeof hash_text, "0x%016llx",
                static_cast<unsigned long long>(config.hash()));
  return nlohmann::json{{"final_losses", per_seed},
                        {"learned_constants", constants},
                        {"seeds", res.seeds},
                        {"aborted", res.aborted},
                        {"wall_time_s", res.wall_time_s},
                        {"config_hash", hash_text}};
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CsvError(path, 0, "cannot open file for writing");
  out << j.dump(2) << '\n';
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CsvError(path, 0, "cannot open file");
  std::stringstream buffer;
  buffer << in.rdbuf();
  try {
    return nlohmann::json::parse(buffer.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw CsvError(path, 0, std::string("not valid JSON: ") + e.what());
  }
}

}  // namespace pinn
