#pragma once

#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include <json.hpp>

#include "selpred/calibration.hpp"
#include "selpred/matrix.hpp"
#include "selpred/selective.hpp"

namespace selpred {

// ---------------------------------------------------------------------------
// Number formatting: shortest representation that round-trips a double.
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view token, std::size_t line) {
  double v = 0.0;
  const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size())
    throw ParseError("cannot parse number '" + std::string(token) + "'", line);
  if (!std::isfinite(v))
    throw ParseError("non-finite value '" + std::string(token) + "'", line);
  return v;
}

inline long long parse_int(std::string_view token, std::size_t line) {
  long long v = 0;
  const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
  if (res.ec != std::errc() || res.ptr != token.data() + token.size())
    throw ParseError("cannot parse integer '" + std::string(token) + "'", line);
  return v;
}

namespace detail {

/// Whole file as lines. Accepts LF and CRLF; drops one trailing empty line.
inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

inline std::vector<std::string_view> split_csv(const std::string& line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.emplace_back(line.data() + start, line.size() - start);
      break;
    }
    out.emplace_back(line.data() + start, pos - start);
    start = pos + 1;
  }
  return out;
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write file: " + path.string());
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Logits / labels files
// ---------------------------------------------------------------------------

/// Logits CSV: header l0,...,l{K-1}, then one decimal-text row per sample.
inline void write_logits(const std::filesystem::path& path, const Matrix& m) {
  auto out = detail::open_out(path);
  for (std::size_t j = 0; j < m.cols; ++j)
    out << (j ? "," : "") << 'l' << j;
  out << '\n';
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j)
      out << (j ? "," : "") << format_double(m(i, j));
    out << '\n';
  }
}

inline Matrix read_logits(const std::filesystem::path& path) {
  const auto lines = detail::read_lines(path);
  if (lines.empty()) throw ParseError("empty logits file: " + path.string(), 1);
  const auto header = detail::split_csv(lines[0]);
  for (std::size_t j = 0; j < header.size(); ++j) {
    if (header[j] != "l" + std::to_string(j))
      throw ParseError("bad logits header, expected l0..l" +
                           std::to_string(header.size() - 1),
                       1);
  }
  const std::size_t cols = header.size();
  if (lines.size() < 2)
    throw ParseError("logits file has no data rows: " + path.string(), 1);
  Matrix m(lines.size() - 1, cols);
  for (std::size_t r = 1; r < lines.size(); ++r) {
    const auto fields = detail::split_csv(lines[r]);
    if (fields.size() != cols)
      throw ParseError("expected " + std::to_string(cols) + " values, got " +
                           std::to_string(fields.size()),
                       r + 1);
    for (std::size_t j = 0; j < cols; ++j)
      m(r - 1, j) = parse_double(fields[j], r + 1);
  }
  return m;
}

/// Labels file: one base-10 integer per line, no header, values in [0, K).
inline void write_labels(const std::filesystem::path& path,
                         const std::vector<int>& labels) {
  auto out = detail::open_out(path);
  for (int y : labels) out << y << '\n';
}

inline std::vector<int> read_labels(const std::filesystem::path& path, int n_classes) {
  const auto lines = detail::read_lines(path);
  if (lines.empty())
    throw ValidationError("empty labels file: " + path.string());
  std::vector<int> labels;
  labels.reserve(lines.size());
  for (std::size_t r = 0; r < lines.size(); ++r) {
    const long long v = parse_int(lines[r], r + 1);
    if (v < 0 || v >= n_classes)
      throw ParseError("label " + std::to_string(v) + " outside [0, " +
                           std::to_string(n_classes) + ")",
                       r + 1);
    labels.push_back(static_cast<int>(v));
  }
  return labels;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  std::size_t pretrain_epoch = 0;
  std::filesystem::path cal_logits, cal_labels, eval_logits, eval_labels;
};

struct Manifest {
  std::string run_id;
  int n_classes = 0;
  double target_coverage = 0.70;
  std::vector<ManifestEntry> checkpoints;
};

namespace detail {

inline std::size_t line_of_byte(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i)
    if (text[i] == '\n') ++line;
  return line;
}

template <typename T>
T require_key(const nlohmann::json& j, const std::string& key,
              const std::string& context) {
  if (!j.contains(key))
    throw ValidationError("manifest: missing key '" + key + "' in " + context);
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("manifest: key '" + key + "' in " + context +
                          " has the wrong type");
  }
}

}  // namespace detail

/// Parse and fully validate a run manifest. Relative data paths are resolved
/// against the manifest's own directory; every referenced file is read and
/// checked for per-split N consistency and K agreement. Unknown keys are
/// ignored for forward compatibility.
inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open manifest: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("manifest is not valid JSON: " + std::string(e.what()),
                     detail::line_of_byte(text, e.byte));
  }

  Manifest m;
  m.run_id = detail::require_key<std::string>(j, "run_id", "manifest");
  m.n_classes = detail::require_key<int>(j, "n_classes", "manifest");
  if (m.n_classes < 2)
    throw ValidationError("manifest: n_classes must be at least 2");
  if (j.contains("target_coverage")) {
    m.target_coverage = detail::require_key<double>(j, "target_coverage", "manifest");
    if (!(m.target_coverage > 0.0) || m.target_coverage > 1.0)
      throw ValidationError("manifest: target_coverage must lie in (0, 1]");
  }
  if (!j.contains("checkpoints") || !j.at("checkpoints").is_array() ||
      j.at("checkpoints").empty())
    throw ValidationError("manifest: needs a non-empty 'checkpoints' array");

  const std::filesystem::path base = path.has_parent_path()
                                         ? path.parent_path()
                                         : std::filesystem::path(".");
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return fp.is_absolute() ? fp : base / fp;
  };

  for (const auto& cj : j.at("checkpoints")) {
    ManifestEntry e;
    e.id = detail::require_key<std::string>(cj, "id", "checkpoint entry");
    const std::string ctx = "checkpoint '" + e.id + "'";
    e.pretrain_epoch = detail::require_key<std::size_t>(cj, "pretrain_epoch", ctx);
    e.cal_logits = resolve(detail::require_key<std::string>(cj, "cal_logits", ctx));
    e.cal_labels = resolve(detail::require_key<std::string>(cj, "cal_labels", ctx));
    e.eval_logits = resolve(detail::require_key<std::string>(cj, "eval_logits", ctx));
    e.eval_labels = resolve(detail::require_key<std::string>(cj, "eval_labels", ctx));
    const std::filesystem::path* paths[] = {&e.cal_logits, &e.cal_labels,
                                            &e.eval_logits, &e.eval_labels};
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b)
        if (*paths[a] == *paths[b])
          throw ValidationError("manifest: duplicate path within " + ctx + ": " +
                                paths[a]->string());
    for (const auto* p : paths)
      if (!std::filesystem::exists(*p))
        throw ValidationError("manifest: missing file for " + ctx + ": " +
                              p->string());
    // Consistency: logits shape vs labels length vs n_classes, per split.
    for (const auto& [lg, lb, split] :
         {std::tuple{e.cal_logits, e.cal_labels, "cal"},
          std::tuple{e.eval_logits, e.eval_labels, "eval"}}) {
      const Matrix logits = read_logits(lg);
      const auto labels = read_labels(lb, m.n_classes);
      if (logits.cols != static_cast<std::size_t>(m.n_classes))
        throw ValidationError("manifest: " + ctx + " " + split + " logits have " +
                              std::to_string(logits.cols) + " columns, expected " +
                              std::to_string(m.n_classes));
      if (logits.rows != labels.size())
        throw ValidationError("manifest: " + ctx + " " + split + " has " +
                              std::to_string(logits.rows) + " logits rows but " +
                              std::to_string(labels.size()) + " labels");
    }
    m.checkpoints.push_back(std::move(e));
  }
  return m;
}

/// Load one manifest entry's calibration and evaluation sets.
inline CheckpointEval load_checkpoint_eval(const Manifest& m,
                                           const ManifestEntry& e) {
  CheckpointEval rec;
  rec.checkpoint_id = e.id;
  rec.pretrain_epoch = e.pretrain_epoch;
  rec.calibration = {read_logits(e.cal_logits), read_labels(e.cal_labels, m.n_classes),
                     m.n_classes};
  rec.evaluation = {read_logits(e.eval_logits), read_labels(e.eval_labels, m.n_classes),
                    m.n_classes};
  rec.calibration.validate();
  rec.evaluation.validate();
  return rec;
}

// ---------------------------------------------------------------------------
// Encoder checkpoint files: "SPCK", u32 version, u32 rows, u32 cols,
// then rows*cols float64 values, everything little-endian.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& buf, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i)
    buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& buf, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  return v;
}

inline double get_f64(const std::string& buf, std::size_t off) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[off + i]))
            << (8 * i);
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[4] = {'S', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(const std::filesystem::path& path, const Matrix& w) {
  std::string buf;
  buf.reserve(16 + 8 * w.data.size());
  buf.append(kCheckpointMagic, 4);
  detail::put_u32(buf, kCheckpointVersion);
  detail::put_u32(buf, static_cast<std::uint32_t>(w.rows));
  detail::put_u32(buf, static_cast<std::uint32_t>(w.cols));
  for (double v : w.data) detail::put_f64(buf, v);
  auto out = detail::open_out(path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Matrix read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 16 || std::memcmp(buf.data(), kCheckpointMagic, 4) != 0)
    throw ValidationError("not a checkpoint file: " + path.string());
  if (detail::get_u32(buf, 4) != kCheckpointVersion)
    throw ValidationError("unsupported checkpoint version in " + path.string());
  const std::size_t rows = detail::get_u32(buf, 8);
  const std::size_t cols = detail::get_u32(buf, 12);
  if (buf.size() != 16 + 8 * rows * cols)
    throw ValidationError("truncated checkpoint file: " + path.string());
  Matrix w(rows, cols);
  for (std::size_t t = 0; t < w.data.size(); ++t)
    w.data[t] = detail::get_f64(buf, 16 + 8 * t);
  if (!w.all_finite())
    throw ValidationError("checkpoint contains non-finite weights: " + path.string());
  return w;
}

// ---------------------------------------------------------------------------
// Result writers
// ---------------------------------------------------------------------------

inline std::string format_optional(const std::optional<double>& v) {
  return v ? format_double(*v) : std::string();
}

/// Risk-coverage curve CSV. Undefined metrics serialize as empty fields.
inline void write_curve_csv(const std::filesystem::path& path,
                            const std::vector<RiskCoveragePoint>& curve) {
  auto out = detail::open_out(path);
  out << "threshold,coverage,n_retained,sel_accuracy,sel_macro_f1,sel_qwk\n";
  for (const auto& pt : curve) {
    out << format_double(pt.threshold) << ',' << format_double(pt.coverage) << ','
        << pt.n_retained << ',' << format_optional(pt.sel_accuracy) << ','
        << format_optional(pt.sel_macro_f1) << ',' << format_optional(pt.sel_qwk)
        << '\n';
  }
}

/// Checkpoint ranking CSV, best checkpoint first.
inline void write_rank_csv(const std::filesystem::path& path,
                           const RankingResult& result) {
  auto out = detail::open_out(path);
  out << "rank,checkpoint_id,pretrain_epoch,threshold,coverage,sel_accuracy,"
         "sel_macro_f1,sel_qwk\n";
  std::size_t rank = 1;
  for (const auto& rc : result.ranking) {
    const auto& pt = rc.operating_point.point;
    out << rank++ << ',' << rc.checkpoint_id << ',' << rc.pretrain_epoch << ','
        << format_double(pt.threshold) << ',' << format_double(pt.coverage) << ','
        << format_optional(pt.sel_accuracy) << ','
        << format_optional(pt.sel_macro_f1) << ',' << format_optional(pt.sel_qwk)
        << '\n';
  }
}

/// Calibration record written by the calibrate command.
inline void write_calibration_record(const std::filesystem::path& path,
                                     const TemperatureFit& fit, std::size_t n) {
  nlohmann::json j;
  j["temperature"] = fit.temperature;
  j["nll"] = fit.nll;
  j["clamped"] = fit.clamped;
  j["n"] = n;
  auto out = detail::open_out(path);
  out << j.dump(2) << '\n';
}

}  // namespace selpred
