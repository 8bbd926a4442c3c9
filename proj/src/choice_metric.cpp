// SPDX-License-Identifier: Apache-2.0
#include "dynaroute/choice_metric.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dynaroute/errors.hpp"
#include "dynaroute/metrics.hpp"
#include "dynaroute/model_bank.hpp"

namespace dynaroute {

std::vector<MetricVariant> metric_variants() {
  return {{"w/ S & F", true, true}, {"w/o F", true, false}, {"w/o S", false, true}, {"w/o S & F", false, false}};
}

void validate_record(const SliceEvalRecord& r) {
  if (r.S.empty()) throw ConfigError("record " + r.case_id + ":" + std::to_string(r.slice_index) + " has no candidates");
  if (r.S.size() != r.F.size()) {
    throw ConfigError("record " + r.case_id + ":" + std::to_string(r.slice_index) + " has " +
                      std::to_string(r.S.size()) + " scores but " + std::to_string(r.F.size()) + " costs");
  }
  if (r.pf < 0) throw ConfigError("record " + r.case_id + ": negative foreground count");
  for (auto f : r.F) {
    if (f == 0) throw ConfigError("record " + r.case_id + ":" + std::to_string(r.slice_index) + " has a FLOPs entry <= 0");
  }
}

namespace {

std::vector<double> softmax(std::vector<double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double total = 0;
  for (auto& x : v) total += (x = std::exp(x - mx));
  for (auto& x : v) x /= total;
  return v;
}

}  // namespace

std::vector<double> choice_scores(const SliceEvalRecord& r, const MetricConfig& cfg) {
  validate_record(r);
  if (!(cfg.flops_unit > 0)) throw ConfigError("flops_unit must be positive");
  std::vector<double> s = r.S, f(r.F.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = cfg.flops_unit / static_cast<double>(r.F[i]);
  if (cfg.softmax_on_S) s = softmax(std::move(s));
  if (cfg.softmax_on_F) f = softmax(std::move(f));
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = (1.0 - cfg.alpha) * s[i] + cfg.alpha * f[i];
  return out;
}

int choice_label(const SliceEvalRecord& r, const MetricConfig& cfg) {
  const auto scores = choice_scores(r, cfg);
  if (r.pf < 1) return 0;
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return static_cast<int>(best) + 1;
}

std::vector<int> oracle_route(const std::vector<SliceEvalRecord>& records, const MetricConfig& cfg) {
  std::vector<int> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(choice_label(r, cfg));
  return out;
}

double slice_dice(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth, int class_count) {
  return mean_foreground_dice(pred, truth, class_count);
}

LabelTable build_label_dataset(const ModelBank& bank, const std::vector<SliceItem>& slices,
                               const MetricConfig& cfg) {
  if (!bank.trained) throw ConfigError("build_label_dataset: bank has not been trained");
  const int n = bank.size();
  const int classes = bank.specs.front().class_count;
  LabelTable table;
  table.records.resize(slices.size());
  for (std::size_t k = 0; k < slices.size(); ++k) {
    auto& r = table.records[k];
    r.case_id = slices[k].case_id;
    r.slice_index = slices[k].slice_index;
    r.pf = foreground_count(slices[k].label);
    r.S.assign(static_cast<std::size_t>(n), 0.0);
    r.F.assign(bank.flops_table.begin(), bank.flops_table.end());
  }
  constexpr std::size_t kBatch = 16;
  for (std::size_t lo = 0; lo < slices.size(); lo += kBatch) {
    const std::size_t hi = std::min(slices.size(), lo + kBatch);
    const auto& first = slices[lo].image;
    std::vector<float> pixels;
    for (std::size_t k = lo; k < hi; ++k) {
      if (slices[k].image.shape() != first.shape()) throw ShapeError("build_label_dataset: mixed slice shapes");
      pixels.insert(pixels.end(), slices[k].image.data().begin(), slices[k].image.data().end());
    }
    Tensor batch({static_cast<std::int64_t>(hi - lo), first.dim(0), first.dim(1), first.dim(2)}, std::move(pixels));
    for (int i = 1; i <= n; ++i) {
      const auto logits = forward_candidate_batch(bank, i, batch);
      const std::int64_t per = logits.numel() / logits.dim(0);
      for (std::size_t k = lo; k < hi; ++k) {
        std::vector<float> one(logits.data().begin() + static_cast<std::ptrdiff_t>((k - lo) * per),
                               logits.data().begin() + static_cast<std::ptrdiff_t>((k - lo + 1) * per));
        const auto mask = argmax_mask(Tensor({logits.dim(1), logits.dim(2), logits.dim(3)}, std::move(one)));
        const double d = slice_dice(mask, slices[k].label, classes);
        // Stored at the CSV precision so reloaded tables label identically.
        table.records[k].S[static_cast<std::size_t>(i - 1)] = std::round(d * 1e6) / 1e6;
      }
    }
  }
  table.labels = oracle_route(table.records, cfg);
  return table;
}

void write_label_table(const std::filesystem::path& path, const LabelTable& table) {
  if (table.records.size() != table.labels.size()) throw ConfigError("label table: record/label count mismatch");
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError(DataError::Kind::kIo, "cannot open " + path.string() + " for writing");
  const std::size_t n = table.records.empty() ? 0 : table.records.front().S.size();
  os << "case_id,slice,pf";
  for (std::size_t i = 1; i <= n; ++i) os << ",s" << i;
  for (std::size_t i = 1; i <= n; ++i) os << ",f" << i;
  os << ",label\n";
  char buf[32];
  for (std::size_t k = 0; k < table.records.size(); ++k) {
    const auto& r = table.records[k];
    if (r.S.size() != n || r.F.size() != n) throw ConfigError("label table: ragged candidate count");
    os << r.case_id << ',' << r.slice_index << ',' << r.pf;
    for (double s : r.S) {
      std::snprintf(buf, sizeof buf, "%.6f", s);
      os << ',' << buf;
    }
    for (auto f : r.F) os << ',' << f;
    os << ',' << table.labels[k] << '\n';
  }
  if (!os) throw DataError(DataError::Kind::kIo, "write failed for " + path.string());
}

namespace {

template <typename V>
V parse_number(const std::string& field, const std::string& where) {
  V v{};
  const char* end = field.data() + field.size();
  auto [p, ec] = std::from_chars(field.data(), end, v);
  if (ec != std::errc() || p != end) throw DataError(DataError::Kind::kInvalid, where + ": bad number '" + field + "'");
  return v;
}

}  // namespace

LabelTable read_label_table(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError(DataError::Kind::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw DataError(DataError::Kind::kTruncated, path.string() + ": missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) header.push_back(f);
  }
  if (header.size() < 6 || header[0] != "case_id" || header[1] != "slice" || header[2] != "pf" ||
      header.back() != "label" || (header.size() - 4) % 2 != 0) {
    throw DataError(DataError::Kind::kInvalid, path.string() + ": unexpected header");
  }
  const std::size_t n = (header.size() - 4) / 2;
  for (std::size_t i = 0; i < n; ++i) {
    if (header[3 + i] != "s" + std::to_string(i + 1) || header[3 + n + i] != "f" + std::to_string(i + 1)) {
      throw DataError(DataError::Kind::kInvalid, path.string() + ": unexpected header");
    }
  }
  LabelTable table;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string f;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (fields.size() != header.size()) throw DataError(DataError::Kind::kInvalid, where + ": wrong field count");
    SliceEvalRecord r;
    r.case_id = fields[0];
    r.slice_index = parse_number<int>(fields[1], where);
    r.pf = parse_number<std::int64_t>(fields[2], where);
    for (std::size_t i = 0; i < n; ++i) r.S.push_back(parse_number<double>(fields[3 + i], where));
    for (std::size_t i = 0; i < n; ++i) r.F.push_back(parse_number<flops::Count>(fields[3 + n + i], where));
    const int label = parse_number<int>(fields.back(), where);
    if (label < 0 || label > static_cast<int>(n)) {
      throw DataError(DataError::Kind::kInvalid, where + ": label " + std::to_string(label) + " outside 0.." +
                                                     std::to_string(n));
    }
    table.records.push_back(std::move(r));
    table.labels.push_back(label);
  }
  return table;
}

}  // namespace dynaroute
