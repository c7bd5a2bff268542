#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "seq2seq/common.hpp"
#include "seq2seq/model.hpp"
#include "seq2seq/rng.hpp"

namespace seq2seq {

/// Suffix array over the flattened token corpus. Documents are joined with a
/// sentinel above every vocabulary id so no query can match across a
/// document boundary. count_occurrences answers in O(|query| log corpus).
class SuffixIndex {
 public:
  static constexpr std::uint32_t kSentinel = 0xffffffffu;

  static SuffixIndex build(const std::vector<TokenIds>& docs) {
    if (docs.empty()) throw std::invalid_argument("suffix index: empty corpus");
    SuffixIndex idx;
    std::size_t total = 0;
    for (const TokenIds& d : docs) total += d.size() + 1;
    idx.tokens_.reserve(total);
    for (const TokenIds& d : docs) {
      idx.doc_offsets_.push_back(idx.tokens_.size());
      idx.tokens_.insert(idx.tokens_.end(), d.begin(), d.end());
      idx.tokens_.push_back(kSentinel);
    }
    idx.suffix_array_.resize(idx.tokens_.size());
    for (std::size_t i = 0; i < idx.suffix_array_.size(); ++i)
      idx.suffix_array_[i] = static_cast<std::uint32_t>(i);
    const auto& toks = idx.tokens_;
    std::sort(idx.suffix_array_.begin(), idx.suffix_array_.end(),
              [&toks](std::uint32_t a, std::uint32_t b) {
                return std::lexicographical_compare(toks.begin() + a, toks.end(),
                                                    toks.begin() + b, toks.end());
              });
    return idx;
  }

  std::size_t count_occurrences(std::span<const std::uint32_t> query) const {
    if (query.empty() || query.size() > tokens_.size()) return 0;
    // lower bound: first suffix not lexicographically less than the query
    auto lo = std::lower_bound(
        suffix_array_.begin(), suffix_array_.end(), query,
        [this](std::uint32_t suf, std::span<const std::uint32_t> q) {
          return suffix_less_than_query(suf, q);
        });
    // upper bound: first suffix that does not start with the query
    auto hi = lo;
    while (hi != suffix_array_.end() && starts_with(*hi, query)) ++hi;
    return static_cast<std::size_t>(hi - lo);
  }

  const std::vector<std::uint32_t>& tokens() const { return tokens_; }
  const std::vector<std::size_t>& doc_offsets() const { return doc_offsets_; }
  const std::vector<std::uint32_t>& suffix_array() const { return suffix_array_; }

 private:
  std::vector<std::uint32_t> tokens_;
  std::vector<std::size_t> doc_offsets_;
  std::vector<std::uint32_t> suffix_array_;

  bool suffix_less_than_query(std::uint32_t suf, std::span<const std::uint32_t> q) const {
    const std::size_t n = tokens_.size();
    for (std::size_t k = 0; k < q.size(); ++k) {
      if (suf + k >= n) return true;  // suffix is a strict prefix of the query
      if (tokens_[suf + k] != q[k]) return tokens_[suf + k] < q[k];
    }
    return false;
  }

  bool starts_with(std::uint32_t suf, std::span<const std::uint32_t> q) const {
    if (suf + q.size() > tokens_.size()) return false;
    for (std::size_t k = 0; k < q.size(); ++k)
      if (tokens_[suf + k] != q[k]) return false;
    return true;
  }
};

/// Frequency bin n holds counts in [2^(n/4), 2^((n+1)/4)).
inline int frequency_bin(std::size_t count) {
  if (count == 0) throw std::invalid_argument("frequency_bin: zero count");
  int n = 0;
  while (std::exp2((n + 1) / 4.0) <= static_cast<double>(count)) ++n;
  return n;
}

/// Length bin m covers [50m + 75, 50(m+1) + 75) with center 50m + 100;
/// m ranges over 0..9 (centers 100..550). Returns nullopt outside the bins.
inline std::optional<int> length_bin(std::size_t len) {
  if (len < 75 || len >= 575) return std::nullopt;
  return static_cast<int>((len - 75) / 50);
}

inline std::size_t length_bin_center(int m) { return 50 * static_cast<std::size_t>(m) + 100; }

struct FreqBin {
  int n = 0;
  double lo = 0, hi = 0;  // [2^(n/4), 2^((n+1)/4))
  std::vector<TokenIds> members;
};

struct LenBin {
  int m = 0;
  std::size_t lo = 0, hi = 0, center = 0;
  std::vector<TokenIds> members;
};

struct BinLimits {
  std::size_t max_per_bin = 2000;  // X cap
  std::size_t min_per_bin = 50;    // bins with X <= this are dropped
  std::size_t freq_window_cap = 125;  // frequency axis uses sequences < 125 tokens
  std::size_t max_frequency_for_length_axis = 3;  // length axis keeps counts < 3
};

namespace detail {

inline std::string content_key(std::span<const std::uint32_t> ids) {
  return std::string(reinterpret_cast<const char*>(ids.data()), ids.size() * 4);
}

}  // namespace detail

/// Duplication-normalized frequency bins: one candidate window per document
/// (its first min(len, cap-1) tokens), content-deduplicated, assigned to the
/// bin holding its corpus occurrence count. Bins keep at most max_per_bin
/// members and bins with <= min_per_bin members are dropped.
inline std::vector<FreqBin> build_frequency_bins(const SuffixIndex& index,
                                                 const std::vector<TokenIds>& docs,
                                                 const BinLimits& limits = {}) {
  std::map<int, FreqBin> bins;
  std::unordered_set<std::string> seen;
  for (const TokenIds& doc : docs) {
    if (doc.empty()) continue;
    const std::size_t len = std::min(doc.size(), limits.freq_window_cap - 1);
    std::span<const std::uint32_t> window(doc.data(), len);
    if (!seen.insert(detail::content_key(window)).second) continue;
    const std::size_t count = index.count_occurrences(window);
    if (count == 0) continue;
    const int n = frequency_bin(count);
    FreqBin& bin = bins[n];
    if (bin.members.empty()) {
      bin.n = n;
      bin.lo = std::exp2(n / 4.0);
      bin.hi = std::exp2((n + 1) / 4.0);
    }
    if (bin.members.size() < limits.max_per_bin)
      bin.members.emplace_back(window.begin(), window.end());
  }
  std::vector<FreqBin> out;
  for (auto& [n, bin] : bins)
    if (bin.members.size() > limits.min_per_bin) out.push_back(std::move(bin));
  return out;
}

/// Context-length bins over rare sequences (corpus count below the limit),
/// one whole-document candidate per document.
inline std::vector<LenBin> build_length_bins(const SuffixIndex& index,
                                             const std::vector<TokenIds>& docs,
                                             const BinLimits& limits = {}) {
  std::map<int, LenBin> bins;
  std::unordered_set<std::string> seen;
  for (const TokenIds& doc : docs) {
    const auto m = length_bin(doc.size());
    if (!m) continue;
    std::span<const std::uint32_t> window(doc.data(), doc.size());
    if (!seen.insert(detail::content_key(window)).second) continue;
    const std::size_t count = index.count_occurrences(window);
    if (count == 0 || count >= limits.max_frequency_for_length_axis) continue;
    LenBin& bin = bins[*m];
    if (bin.members.empty()) {
      bin.m = *m;
      bin.lo = 50 * static_cast<std::size_t>(*m) + 75;
      bin.hi = bin.lo + 50;
      bin.center = length_bin_center(*m);
    }
    if (bin.members.size() < limits.max_per_bin)
      bin.members.emplace_back(doc.begin(), doc.end());
  }
  std::vector<LenBin> out;
  for (auto& [m, bin] : bins) out.push_back(std::move(bin));
  return out;
}

struct ProbeOutcome {
  std::vector<std::uint8_t> outcomes;  // one flag per probed member, in order
  std::size_t excluded = 0;            // members too short to probe
};

/// CLM extraction probe: drop the last 50 tokens, prompt [CLM] + prefix, and
/// greedily decode 50 tokens; success iff they equal the held-out suffix
/// exactly. Members shorter than 51 tokens are excluded.
template <typename T>
ProbeOutcome probe_clm(const ModelParams<T>& model, const SpecialTokens& sp,
                       const std::vector<TokenIds>& members, std::size_t suffix_len = 50) {
  std::vector<const TokenIds*> eligible;
  ProbeOutcome result;
  for (const TokenIds& m : members) {
    if (m.size() < suffix_len + 1)
      ++result.excluded;
    else
      eligible.push_back(&m);
  }
  result.outcomes.assign(eligible.size(), 0);
  parallel_for(eligible.size(), [&](std::size_t i) {
    const TokenIds& m = *eligible[i];
    TokenIds enc;
    enc.reserve(m.size() - suffix_len + 1);
    enc.push_back(sp.clm);
    enc.insert(enc.end(), m.begin(), m.end() - static_cast<std::ptrdiff_t>(suffix_len));
    const TokenIds gen = generate_greedy(model, {enc}, suffix_len, false, sp);
    result.outcomes[i] =
        gen.size() == suffix_len &&
        std::equal(gen.begin(), gen.end(), m.end() - static_cast<std::ptrdiff_t>(suffix_len));
  });
  return result;
}

/// Denoising extraction probe: delete the single middle token (span of
/// length 1) and greedily reconstruct; success iff the full reconstruction
/// equals the original, which puts the missing token back in its position.
template <typename T>
ProbeOutcome probe_denoise(const ModelParams<T>& model, const SpecialTokens& sp,
                           const std::vector<TokenIds>& members) {
  std::vector<const TokenIds*> eligible;
  ProbeOutcome result;
  for (const TokenIds& m : members) {
    if (m.size() < 3)
      ++result.excluded;
    else
      eligible.push_back(&m);
  }
  result.outcomes.assign(eligible.size(), 0);
  parallel_for(eligible.size(), [&](std::size_t i) {
    const TokenIds& m = *eligible[i];
    const std::size_t mid = m.size() / 2;
    TokenIds enc;
    enc.reserve(m.size() - 1);
    enc.insert(enc.end(), m.begin(), m.begin() + static_cast<std::ptrdiff_t>(mid));
    enc.insert(enc.end(), m.begin() + static_cast<std::ptrdiff_t>(mid) + 1, m.end());
    const TokenIds gen = generate_greedy(model, {enc}, m.size() + 2, false, sp);
    result.outcomes[i] = gen == m;
  });
  return result;
}

struct BinReport {
  std::string axis;   // "frequency" or "length"
  std::string probe;  // "clm" or "denoise"
  int bin_id = 0;     // n or m
  double x = 0;       // bin lower count edge, or length-bin center
  double mean = 0;
  double stddev = 0;
  std::size_t sample_count = 0;
};

struct MemorizationReport {
  std::vector<BinReport> rows;
  std::vector<std::string> diagnostics;
};

/// Mean and standard deviation of the extraction rate over `resamples`
/// bootstrap resamples (with replacement) of one bin's outcomes.
inline std::pair<double, double> bootstrap_rate(const std::vector<std::uint8_t>& outcomes,
                                                std::size_t resamples, Rng& rng) {
  if (outcomes.empty()) throw std::invalid_argument("bootstrap: empty bin");
  std::vector<double> rates(resamples);
  for (std::size_t r = 0; r < resamples; ++r) {
    std::size_t hits = 0;
    for (std::size_t k = 0; k < outcomes.size(); ++k)
      hits += outcomes[rng.next_index(outcomes.size())];
    rates[r] = static_cast<double>(hits) / static_cast<double>(outcomes.size());
  }
  double mean = 0;
  for (double r : rates) mean += r;
  mean /= static_cast<double>(resamples);
  double var = 0;
  for (double r : rates) var += (r - mean) * (r - mean);
  var /= static_cast<double>(resamples);
  return {mean, std::sqrt(var)};
}

inline void append_bootstrap_row(MemorizationReport& report, const std::string& axis,
                                 const std::string& probe, int bin_id, double x,
                                 const std::vector<std::uint8_t>& outcomes,
                                 std::size_t resamples, Rng& rng) {
  if (outcomes.empty()) {
    report.diagnostics.push_back(axis + "/" + probe + " bin " + std::to_string(bin_id) +
                                 ": no probed members, omitted");
    return;
  }
  const auto [mean, sd] = bootstrap_rate(outcomes, resamples, rng);
  report.rows.push_back({axis, probe, bin_id, x, mean, sd, outcomes.size()});
}

inline void write_report(const MemorizationReport& report, const std::filesystem::path& table_path,
                         const std::filesystem::path& plot_path) {
  std::ofstream table(table_path, std::ios::binary);
  if (!table) throw FileError("cannot write report: " + table_path.string());
  table << "bin\taxis\tprobe\tmean\tstd\tX\n";
  for (const BinReport& r : report.rows)
    table << r.bin_id << "\t" << r.axis << "\t" << r.probe << "\t" << r.mean << "\t" << r.stddev
          << "\t" << r.sample_count << "\n";
  for (const std::string& d : report.diagnostics) table << "# " << d << "\n";

  std::ofstream plot(plot_path, std::ios::binary);
  if (!plot) throw FileError("cannot write plot data: " + plot_path.string());
  for (const BinReport& r : report.rows)
    plot << r.axis << "/" << r.probe << " " << r.x << " " << r.mean << " " << r.stddev << "\n";
}

}  // namespace seq2seq
