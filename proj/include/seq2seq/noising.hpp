#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "seq2seq/common.hpp"
#include "seq2seq/corpus.hpp"
#include "seq2seq/rng.hpp"

namespace seq2seq {

struct NoisingConfig {
  double drop_ratio = 0.15;      // fraction of tokens deleted per denoise example
  double span_mean = 3.0;        // Poisson mean for span lengths
  double clm_fraction = 0.20;    // share of CLM pairs in the mixed stream
  double clm_split_min = 0.20;   // uniform range for the CLM prefix fraction
  double clm_split_max = 0.80;
  std::uint64_t seed = 0;
  std::uint32_t clm_id = 3;
  std::uint32_t doc_id = 4;

  void validate() const {
    if (drop_ratio < 0 || drop_ratio >= 1)
      throw ConfigError("noising: drop_ratio must be in [0,1)");
    if (span_mean <= 0) throw ConfigError("noising: span_mean must be > 0");
    if (clm_fraction < 0 || clm_fraction > 1)
      throw ConfigError("noising: clm_fraction must be in [0,1]");
    if (clm_split_min <= 0 || clm_split_max >= 1 || clm_split_min > clm_split_max)
      throw ConfigError("noising: clm split range must satisfy 0 < min <= max < 1");
  }
};

enum class TaskKind { Denoise, Clm };

struct NoisedPair {
  TokenIds encoder_ids;
  TokenIds decoder_target_ids;
  TaskKind kind = TaskKind::Denoise;
};

/// Span-deletion denoising: exactly floor(drop_ratio * len) tokens are
/// removed from the encoder input in Poisson(span_mean)-length spans (clamped
/// to >= 1, final span truncated to hit the count); the target is the
/// untouched sequence. No mask token is ever inserted. Returns nullopt when
/// the sequence is too short to noise.
inline std::optional<NoisedPair> make_denoise(const TokenIds& ids, const NoisingConfig& cfg,
                                              Rng& rng) {
  if (ids.size() < 2) return std::nullopt;
  NoisedPair pair;
  pair.kind = TaskKind::Denoise;
  pair.decoder_target_ids = ids;

  const std::size_t drop_target =
      static_cast<std::size_t>(cfg.drop_ratio * static_cast<double>(ids.size()));
  if (drop_target == 0) {
    pair.encoder_ids = ids;
    return pair;
  }

  std::vector<char> dropped(ids.size(), 0);
  std::size_t count = 0;
  while (count < drop_target) {
    std::size_t span = std::max<std::uint64_t>(1, rng.next_poisson(cfg.span_mean));
    span = std::min(span, drop_target - count);
    bool placed = false;
    for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
      const std::size_t start = rng.next_index(ids.size());
      if (start + span > ids.size()) continue;
      bool overlap = false;
      for (std::size_t k = start; k < start + span; ++k)
        if (dropped[k]) {
          overlap = true;
          break;
        }
      if (overlap) continue;
      for (std::size_t k = start; k < start + span; ++k) dropped[k] = 1;
      count += span;
      placed = true;
    }
    // Fragmented mask: fall back to single-token spans, which always fit
    // while count < drop_target <= len.
    if (!placed) span = 1;
    while (!placed) {
      const std::size_t start = rng.next_index(ids.size());
      if (!dropped[start]) {
        dropped[start] = 1;
        ++count;
        placed = true;
      }
    }
  }

  pair.encoder_ids.reserve(ids.size() - drop_target);
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (!dropped[i]) pair.encoder_ids.push_back(ids[i]);
  return pair;
}

/// Causal-LM pair: a uniform fraction f in [split_min, split_max] of the
/// document becomes the [CLM]-marked encoder input, the rest the target.
/// Requires a single document (no DOC separator inside).
inline std::optional<NoisedPair> make_clm(const TokenIds& ids, const NoisingConfig& cfg,
                                          Rng& rng) {
  for (std::uint32_t id : ids)
    if (id == cfg.doc_id)
      throw std::invalid_argument("make_clm: DOC separator inside a single-document input");
  if (ids.size() < 5) return std::nullopt;

  const double f = rng.next_range(cfg.clm_split_min, cfg.clm_split_max);
  const auto cut = static_cast<std::size_t>(f * static_cast<double>(ids.size()));
  NoisedPair pair;
  pair.kind = TaskKind::Clm;
  pair.encoder_ids.reserve(cut + 1);
  pair.encoder_ids.push_back(cfg.clm_id);
  pair.encoder_ids.insert(pair.encoder_ids.end(), ids.begin(), ids.begin() + cut);
  pair.decoder_target_ids.assign(ids.begin() + cut, ids.end());
  return pair;
}

/// Mixes the two objectives at clm_fraction, drawing denoise examples from
/// the packed stream and CLM examples from the single-document stream. All
/// randomness flows through one seeded generator, so the pair stream replays
/// exactly. Ends cleanly when the needed upstream is exhausted.
class ObjectiveMixer {
 public:
  using PackedSource = std::function<std::optional<TokenIds>()>;
  using DocSource = std::function<std::optional<TokenIds>()>;

  ObjectiveMixer(PackedSource packed, DocSource docs, const NoisingConfig& cfg)
      : packed_(std::move(packed)), docs_(std::move(docs)), cfg_(cfg), rng_(cfg.seed) {
    cfg_.validate();
  }

  std::optional<NoisedPair> next() {
    while (true) {
      const bool clm = rng_.next_bernoulli(cfg_.clm_fraction);
      if (clm) {
        auto doc = docs_();
        if (!doc) return std::nullopt;
        if (auto pair = make_clm(*doc, cfg_, rng_)) return pair;
      } else {
        auto packed = packed_();
        if (!packed) return std::nullopt;
        if (auto pair = make_denoise(*packed, cfg_, rng_)) return pair;
      }
      // too-short input: skip and draw again
    }
  }

 private:
  PackedSource packed_;
  DocSource docs_;
  NoisingConfig cfg_;
  Rng rng_;
};

/// Endless cycling source over an in-memory record set.
inline std::function<std::optional<TokenIds>()> cycle_records(std::vector<TokenIds> records) {
  auto pos = std::make_shared<std::size_t>(0);
  auto data = std::make_shared<std::vector<TokenIds>>(std::move(records));
  return [pos, data]() -> std::optional<TokenIds> {
    if (data->empty()) return std::nullopt;
    TokenIds out = (*data)[*pos % data->size()];
    ++*pos;
    return out;
  };
}

}  // namespace seq2seq
