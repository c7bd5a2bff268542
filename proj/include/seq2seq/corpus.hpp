#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "seq2seq/common.hpp"
#include "seq2seq/rng.hpp"

namespace seq2seq {

struct SourceSpec {
  std::string name;
  std::string language;
  std::vector<std::string> documents;
  double base_weight = 1.0;      // e.g. 10 for a high-quality source
  double spoken_fraction = 0.0;  // probability a drawn document is spoken-form
};

/// Per-language sampling probabilities q_i = p_i^alpha / sum_j p_j^alpha,
/// p_i = n_i / sum_j n_j.
struct MixWeights {
  std::map<std::string, double> q;
  double alpha = 1.0;
};

inline MixWeights language_weights(const std::map<std::string, std::uint64_t>& counts,
                                   double alpha) {
  if (counts.empty()) throw ConfigError("language_weights: no languages given");
  if (alpha < 0) throw ConfigError("language_weights: alpha must be >= 0");
  double total = 0;
  for (const auto& [lang, n] : counts) {
    if (n == 0) throw ConfigError("language_weights: zero count for language " + lang);
    total += static_cast<double>(n);
  }
  MixWeights w;
  w.alpha = alpha;
  double norm = 0;
  for (const auto& [lang, n] : counts) {
    const double p = static_cast<double>(n) / total;
    const double scaled = std::pow(p, alpha);
    w.q[lang] = scaled;
    norm += scaled;
  }
  for (auto& [lang, q] : w.q) q /= norm;
  return w;
}

namespace detail {

// Punctuation removed by the spoken-form formatter: ASCII punctuation plus a
// fixed table of common non-ASCII marks. Code points, not bytes.
inline bool is_spoken_punct(char32_t cp) {
  if (cp < 0x80) {
    return (cp >= '!' && cp <= '/') || (cp >= ':' && cp <= '@') ||
           (cp >= '[' && cp <= '`') || (cp >= '{' && cp <= '~');
  }
  static const std::array<char32_t, 36> table = {
      0x00A1, 0x00BF, 0x00AB, 0x00BB, 0x2018, 0x2019, 0x201A, 0x201C, 0x201D,
      0x201E, 0x2013, 0x2014, 0x2026, 0x2039, 0x203A, 0x00B7, 0x2022, 0x3001,
      0x3002, 0x300C, 0x300D, 0x300E, 0x300F, 0x3008, 0x3009, 0x300A, 0x300B,
      0xFF01, 0xFF08, 0xFF09, 0xFF0C, 0xFF0E, 0xFF1A, 0xFF1B, 0xFF1F, 0x30FB};
  return std::find(table.begin(), table.end(), cp) != table.end();
}

// Decodes one UTF-8 code point at `i`; returns its byte length, or 0 for an
// invalid lead byte (caller passes the byte through untouched).
inline std::size_t utf8_decode(std::string_view s, std::size_t i, char32_t& cp) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len;
  if (b0 < 0x80) {
    cp = b0;
    return 1;
  } else if ((b0 >> 5) == 0x6) {
    len = 2;
    cp = b0 & 0x1f;
  } else if ((b0 >> 4) == 0xe) {
    len = 3;
    cp = b0 & 0x0f;
  } else if ((b0 >> 3) == 0x1e) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b >> 6) != 0x2) return 0;
    cp = (cp << 6) | (b & 0x3f);
  }
  return len;
}

}  // namespace detail

/// Spoken-form formatter: ASCII lowercasing plus deletion of the punctuation
/// table above. Idempotent; invalid UTF-8 bytes pass through unchanged.
inline std::string to_spoken(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    char32_t cp = 0;
    const std::size_t len = detail::utf8_decode(text, i, cp);
    if (len == 0) {
      out += text[i++];
      continue;
    }
    if (detail::is_spoken_punct(cp)) {
      i += len;
      continue;
    }
    if (cp < 0x80) {
      char c = static_cast<char>(cp);
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      out += c;
    } else {
      out.append(text.substr(i, len));
    }
    i += len;
  }
  return out;
}

struct SampledDoc {
  std::string text;
  std::string language;
  bool spoken = false;
  std::size_t source_index = 0;
};

/// Infinite reproducible document stream. A source is drawn with probability
/// proportional to q_language * base_weight, a document uniformly within it,
/// and the spoken form applied with probability spoken_fraction.
class SampleStream {
 public:
  SampleStream(std::vector<SourceSpec> sources, const MixWeights& weights, std::uint64_t seed)
      : sources_(std::move(sources)), rng_(seed) {
    if (sources_.empty()) throw ConfigError("sample_stream: no sources");
    double total = 0;
    for (const auto& s : sources_) {
      auto it = weights.q.find(s.language);
      if (it == weights.q.end())
        throw ConfigError("sample_stream: no weight for language " + s.language);
      if (s.documents.empty())
        throw ConfigError("sample_stream: source " + s.name + " has no documents");
      total += it->second * s.base_weight;
      cumulative_.push_back(total);
    }
    for (double& c : cumulative_) c /= total;
  }

  SampledDoc next() {
    const double u = rng_.next_double();
    std::size_t s = std::lower_bound(cumulative_.begin(), cumulative_.end(), u) -
                    cumulative_.begin();
    if (s >= sources_.size()) s = sources_.size() - 1;
    const SourceSpec& src = sources_[s];
    const std::string& doc = src.documents[rng_.next_index(src.documents.size())];
    SampledDoc out;
    out.language = src.language;
    out.source_index = s;
    out.spoken = rng_.next_bernoulli(src.spoken_fraction);
    out.text = out.spoken ? to_spoken(doc) : doc;
    return out;
  }

 private:
  std::vector<SourceSpec> sources_;
  std::vector<double> cumulative_;
  Rng rng_;
};

struct PackedSequence {
  TokenIds ids;
  std::vector<std::size_t> doc_boundaries;  // positions of DOC separators
  std::vector<std::string> languages;       // one tag per packed document
};

/// Greedy first-fit packer. Documents are appended, separated by `doc_id`,
/// until the next one would overflow `target_len`; an oversized document is
/// emitted as chunks of exactly target_len with the remainder opening the
/// next pack. No token is lost or duplicated.
class Packer {
 public:
  Packer(std::size_t target_len, std::uint32_t doc_id)
      : target_len_(target_len), doc_id_(doc_id) {
    if (target_len <= 2) throw ConfigError("pack: target_len must be > 2");
  }

  template <typename Emit>
  void add(const TokenIds& doc, const std::string& language, Emit&& emit) {
    if (doc.empty()) return;
    if (doc.size() > target_len_) {
      flush(emit);
      std::size_t pos = 0;
      while (doc.size() - pos >= target_len_) {
        PackedSequence chunk;
        chunk.ids.assign(doc.begin() + pos, doc.begin() + pos + target_len_);
        chunk.languages.push_back(language);
        emit(std::move(chunk));
        pos += target_len_;
      }
      if (pos < doc.size()) {
        cur_.ids.assign(doc.begin() + pos, doc.end());
        cur_.languages.push_back(language);
      }
      return;
    }
    const std::size_t cost = cur_.ids.empty() ? doc.size() : doc.size() + 1;
    if (cur_.ids.size() + cost > target_len_) flush(emit);
    if (!cur_.ids.empty()) {
      cur_.doc_boundaries.push_back(cur_.ids.size());
      cur_.ids.push_back(doc_id_);
    }
    cur_.ids.insert(cur_.ids.end(), doc.begin(), doc.end());
    cur_.languages.push_back(language);
  }

  template <typename Emit>
  void flush(Emit&& emit) {
    if (!cur_.ids.empty()) {
      emit(std::move(cur_));
      cur_ = PackedSequence{};
    }
  }

 private:
  std::size_t target_len_;
  std::uint32_t doc_id_;
  PackedSequence cur_;
};

/// Convenience wrapper over Packer for in-memory streams.
inline std::vector<PackedSequence> pack(const std::vector<TokenSequence>& docs,
                                        std::size_t target_len, std::uint32_t doc_id) {
  std::vector<PackedSequence> out;
  Packer packer(target_len, doc_id);
  auto emit = [&](PackedSequence&& p) { out.push_back(std::move(p)); };
  for (const auto& d : docs) packer.add(d.ids, d.language, emit);
  packer.flush(emit);
  return out;
}

namespace detail {

inline std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::vector<std::string> split_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= text.size(); ++i) {
    if (i == text.size() || text[i] == '\n' || text[i] == '.') {
      if (i > start) out.emplace_back(text.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

inline std::string join_tokens(const std::vector<std::string>& toks, std::size_t begin,
                               std::size_t n) {
  std::string key;
  for (std::size_t k = 0; k < n; ++k) {
    if (k) key += '\x1f';
    key += toks[begin + k];
  }
  return key;
}

}  // namespace detail

/// N-gram set over whitespace tokens of spoken-form benchmark text.
class BenchmarkNgrams {
 public:
  BenchmarkNgrams(const std::vector<std::string>& benchmarks, int n) : n_(n) {
    if (n < 1) throw ConfigError("decontaminate: n must be >= 1");
    if (benchmarks.empty()) throw ConfigError("decontaminate: empty benchmark set");
    for (const std::string& doc : benchmarks) {
      const auto toks = detail::whitespace_tokens(to_spoken(doc));
      if (toks.size() < static_cast<std::size_t>(n)) continue;
      for (std::size_t i = 0; i + n <= toks.size(); ++i)
        set_.insert(detail::join_tokens(toks, i, n));
    }
  }

  /// True iff any sentence of `doc` contains an n-gram from the set.
  bool contaminated(std::string_view doc) const {
    for (const std::string& sent : detail::split_sentences(doc)) {
      const auto toks = detail::whitespace_tokens(to_spoken(sent));
      if (toks.size() < static_cast<std::size_t>(n_)) continue;
      for (std::size_t i = 0; i + n_ <= toks.size(); ++i)
        if (set_.count(detail::join_tokens(toks, i, n_))) return true;
    }
    return false;
  }

  int n() const { return n_; }
  std::size_t ngram_count() const { return set_.size(); }

 private:
  int n_;
  std::unordered_set<std::string> set_;
};

struct DecontResult {
  std::vector<std::string> kept;
  std::size_t dropped_count = 0;
};

inline DecontResult decontaminate(const std::vector<std::string>& docs,
                                  const std::vector<std::string>& benchmarks, int n = 13) {
  BenchmarkNgrams set(benchmarks, n);
  DecontResult result;
  result.kept.reserve(docs.size());
  for (const std::string& doc : docs) {
    if (set.contaminated(doc))
      ++result.dropped_count;
    else
      result.kept.push_back(doc);
  }
  return result;
}

// --- shard files: (u32 length, u32 ids...) records, little-endian ---------

namespace detail {

inline void put_u32_le(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline bool get_u32_le(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
      (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

}  // namespace detail

inline void write_shard(const std::filesystem::path& path,
                        const std::vector<TokenIds>& records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot write shard: " + path.string());
  for (const TokenIds& rec : records) {
    detail::put_u32_le(os, static_cast<std::uint32_t>(rec.size()));
    for (std::uint32_t id : rec) detail::put_u32_le(os, id);
  }
}

inline std::vector<TokenIds> read_shard(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot read shard: " + path.string());
  std::vector<TokenIds> records;
  std::uint32_t len = 0;
  while (detail::get_u32_le(is, len)) {
    TokenIds rec(len);
    for (std::uint32_t i = 0; i < len; ++i) {
      if (!detail::get_u32_le(is, rec[i]))
        throw FileError("truncated shard record in " + path.string());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace seq2seq
