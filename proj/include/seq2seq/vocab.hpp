#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "seq2seq/common.hpp"

namespace seq2seq {

/// Deterministic byte-pair-merge subword vocabulary with byte fallback.
///
/// ID layout, fixed by construction:
///   [0, 5)                         special tokens PAD/BOS/EOS/CLM/DOC
///   [5, 5 + reserved)              reserved block, no pieces assigned
///   [5 + reserved, +256)           single-byte pieces (fallback coverage)
///   remainder                      learned merges
///
/// Immutable after training; encode/decode are pure and thread-safe.
class Vocab {
 public:
  SpecialTokens special;
  std::uint32_t reserved_begin = 0;
  std::uint32_t reserved_end = 0;  // half-open

  std::size_t size() const { return id_to_piece_.size(); }

  bool is_reserved(std::uint32_t id) const {
    return id >= reserved_begin && id < reserved_end;
  }

  bool is_special(std::uint32_t id) const { return id < kSpecialCount; }

  const std::string& piece(std::uint32_t id) const { return id_to_piece_.at(id); }

  const std::unordered_map<std::string, std::uint32_t>& piece_to_id() const {
    return piece_to_id_;
  }

  SpecialTokens specials() const { return special; }

  /// Greedy longest-match segmentation. Total on arbitrary bytes: every
  /// single byte has a piece, so a match always exists. Never emits special
  /// or reserved IDs.
  TokenIds encode(std::string_view text) const {
    TokenIds out;
    out.reserve(text.size() / 2 + 1);
    std::size_t pos = 0;
    while (pos < text.size()) {
      std::size_t limit = std::min(max_piece_len_, text.size() - pos);
      std::uint32_t id = 0;
      std::size_t matched = 0;
      for (std::size_t len = limit; len >= 1; --len) {
        auto it = match_table_.find(std::string(text.substr(pos, len)));
        if (it != match_table_.end()) {
          id = it->second;
          matched = len;
          break;
        }
      }
      out.push_back(id);
      pos += matched;
    }
    return out;
  }

  /// Inverse of encode on ordinary IDs; special tokens render as their
  /// bracketed names. Reserved or out-of-range IDs are a caller bug.
  std::string decode(const TokenIds& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::uint32_t id = ids[i];
      if (id >= size())
        throw std::invalid_argument("decode: id " + std::to_string(id) +
                                    " out of range at position " + std::to_string(i));
      if (is_reserved(id))
        throw std::invalid_argument("decode: reserved id " + std::to_string(id) +
                                    " at position " + std::to_string(i));
      out += id_to_piece_[id];
    }
    return out;
  }

  /// Trains a vocabulary of exactly `target_size` entries. Merge selection:
  /// most frequent adjacent pair, ties broken by the lexicographically
  /// smaller (left piece, right piece). Deterministic given corpus order.
  static Vocab train(const std::vector<std::string>& corpus, std::size_t target_size,
                     std::uint32_t reserved_count) {
    const std::size_t min_size = 256 + kSpecialCount + reserved_count;
    if (target_size < min_size)
      throw ConfigError("tokenizer: target_size " + std::to_string(target_size) +
                        " below minimum " + std::to_string(min_size) +
                        " (256 bytes + " + std::to_string(kSpecialCount) +
                        " specials + " + std::to_string(reserved_count) + " reserved)");
    if (corpus.empty()) throw ConfigError("tokenizer: empty training corpus");

    Vocab v;
    v.reserved_begin = kSpecialCount;
    v.reserved_end = kSpecialCount + reserved_count;
    v.id_to_piece_.assign(target_size > min_size ? min_size : target_size, std::string());
    v.id_to_piece_[v.special.pad] = "[PAD]";
    v.id_to_piece_[v.special.bos] = "[BOS]";
    v.id_to_piece_[v.special.eos] = "[EOS]";
    v.id_to_piece_[v.special.clm] = "[CLM]";
    v.id_to_piece_[v.special.doc] = "[DOC]";
    const std::uint32_t byte_base = v.reserved_end;
    for (int b = 0; b < 256; ++b)
      v.id_to_piece_[byte_base + b] = std::string(1, static_cast<char>(b));

    // Working representation: each document as a sequence of current IDs.
    std::vector<std::vector<std::uint32_t>> docs;
    docs.reserve(corpus.size());
    for (const std::string& text : corpus) {
      std::vector<std::uint32_t> ids;
      ids.reserve(text.size());
      for (unsigned char c : text) ids.push_back(byte_base + c);
      docs.push_back(std::move(ids));
    }

    while (v.id_to_piece_.size() < target_size) {
      std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint64_t> pair_counts;
      for (const auto& doc : docs)
        for (std::size_t i = 0; i + 1 < doc.size(); ++i)
          ++pair_counts[{doc[i], doc[i + 1]}];

      // Pick max count; break ties by lexicographic piece bytes. Pairs whose
      // concatenation collides with an existing piece are skipped (a
      // duplicate piece would break the piece<->id bijection and can never
      // win a longest-match anyway).
      bool found = false;
      std::pair<std::uint32_t, std::uint32_t> best{};
      std::uint64_t best_count = 0;
      std::string best_piece;
      for (const auto& [pr, count] : pair_counts) {
        std::string piece = v.id_to_piece_[pr.first] + v.id_to_piece_[pr.second];
        if (v.lookup_all(piece)) continue;
        bool better = false;
        if (!found || count > best_count) {
          better = true;
        } else if (count == best_count) {
          const std::string& l = v.id_to_piece_[pr.first];
          const std::string& bl = v.id_to_piece_[best.first];
          if (l < bl || (l == bl && v.id_to_piece_[pr.second] < v.id_to_piece_[best.second]))
            better = true;
        }
        if (better) {
          found = true;
          best = pr;
          best_count = count;
          best_piece = std::move(piece);
        }
      }
      if (!found)
        throw ConfigError("tokenizer: corpus exhausted after " +
                          std::to_string(v.id_to_piece_.size()) +
                          " entries; cannot reach target_size " + std::to_string(target_size));

      const auto new_id = static_cast<std::uint32_t>(v.id_to_piece_.size());
      v.id_to_piece_.push_back(best_piece);
      v.piece_to_id_[best_piece] = new_id;  // incremental, finished below
      for (auto& doc : docs) {
        std::size_t w = 0;
        for (std::size_t r = 0; r < doc.size();) {
          if (r + 1 < doc.size() && doc[r] == best.first && doc[r + 1] == best.second) {
            doc[w++] = new_id;
            r += 2;
          } else {
            doc[w++] = doc[r++];
          }
        }
        doc.resize(w);
      }
    }
    v.rebuild_tables();
    return v;
  }

  /// Line-oriented text format: a header, then one escaped piece per line in
  /// ID order (reserved IDs are empty lines). Byte-exact across platforms.
  void save(const std::filesystem::path& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FileError("cannot write vocabulary file: " + path.string());
    os << "seq2seq-vocab v1 size=" << size() << " reserved=" << reserved_begin << ":"
       << reserved_end << " pad=" << special.pad << " bos=" << special.bos
       << " eos=" << special.eos << " clm=" << special.clm << " doc=" << special.doc << "\n";
    for (const std::string& p : id_to_piece_) os << escape_piece(p) << "\n";
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FileError("cannot read vocabulary file: " + path.string());
    std::string header;
    std::getline(is, header);
    Vocab v;
    std::size_t size = 0;
    if (!parse_header(header, v, size))
      throw FileError("bad vocabulary header in " + path.string());
    v.id_to_piece_.reserve(size);
    std::string line;
    while (v.id_to_piece_.size() < size && std::getline(is, line))
      v.id_to_piece_.push_back(unescape_piece(line));
    if (v.id_to_piece_.size() != size)
      throw FileError("truncated vocabulary file: " + path.string());
    v.rebuild_tables();
    return v;
  }

 private:
  std::vector<std::string> id_to_piece_;
  std::unordered_map<std::string, std::uint32_t> piece_to_id_;  // non-reserved ids
  std::unordered_map<std::string, std::uint32_t> match_table_;  // byte + merge pieces only
  std::size_t max_piece_len_ = 1;

  bool lookup_all(const std::string& piece) const {
    return piece_to_id_.count(piece) > 0 || piece == "[PAD]" || piece == "[BOS]" ||
           piece == "[EOS]" || piece == "[CLM]" || piece == "[DOC]";
  }

  void rebuild_tables() {
    piece_to_id_.clear();
    match_table_.clear();
    max_piece_len_ = 1;
    for (std::uint32_t id = 0; id < id_to_piece_.size(); ++id) {
      if (is_reserved(id)) continue;
      piece_to_id_[id_to_piece_[id]] = id;
      if (!is_special(id)) {
        match_table_[id_to_piece_[id]] = id;
        max_piece_len_ = std::max(max_piece_len_, id_to_piece_[id].size());
      }
    }
  }

  static std::string escape_piece(const std::string& p) {
    std::string out;
    for (unsigned char c : p) {
      if (c == '\\') {
        out += "\\\\";
      } else if (c >= 0x21 && c < 0x7f) {
        out += static_cast<char>(c);
      } else {
        char buf[5];
        std::snprintf(buf, sizeof buf, "\\x%02x", c);
        out += buf;
      }
    }
    return out;
  }

  static std::string unescape_piece(const std::string& line) {
    std::string out;
    for (std::size_t i = 0; i < line.size();) {
      if (line[i] == '\\' && i + 1 < line.size()) {
        if (line[i + 1] == '\\') {
          out += '\\';
          i += 2;
        } else if (line[i + 1] == 'x' && i + 3 < line.size()) {
          out += static_cast<char>(std::stoi(line.substr(i + 2, 2), nullptr, 16));
          i += 4;
        } else {
          out += line[i++];
        }
      } else {
        out += line[i++];
      }
    }
    return out;
  }

  static bool parse_header(const std::string& header, Vocab& v, std::size_t& size) {
    std::istringstream is(header);
    std::string magic, version;
    if (!(is >> magic >> version) || magic != "seq2seq-vocab" || version != "v1") return false;
    std::string kv;
    bool have_size = false;
    while (is >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) return false;
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      if (key == "size") {
        size = std::stoull(val);
        have_size = true;
      } else if (key == "reserved") {
        auto colon = val.find(':');
        if (colon == std::string::npos) return false;
        v.reserved_begin = static_cast<std::uint32_t>(std::stoul(val.substr(0, colon)));
        v.reserved_end = static_cast<std::uint32_t>(std::stoul(val.substr(colon + 1)));
      } else if (key == "pad") {
        v.special.pad = static_cast<std::uint32_t>(std::stoul(val));
      } else if (key == "bos") {
        v.special.bos = static_cast<std::uint32_t>(std::stoul(val));
      } else if (key == "eos") {
        v.special.eos = static_cast<std::uint32_t>(std::stoul(val));
      } else if (key == "clm") {
        v.special.clm = static_cast<std::uint32_t>(std::stoul(val));
      } else if (key == "doc") {
        v.special.doc = static_cast<std::uint32_t>(std::stoul(val));
      } else {
        return false;
      }
    }
    return have_size;
  }
};

}  // namespace seq2seq
