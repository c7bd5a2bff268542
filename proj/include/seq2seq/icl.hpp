#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "seq2seq/common.hpp"
#include "seq2seq/model.hpp"
#include "seq2seq/vocab.hpp"

namespace seq2seq {

enum class PromptMode { DenoiseScore, DenoiseGenerate, ClmScore, ClmGenerate, FidGenerate };

inline bool is_score_mode(PromptMode m) {
  return m == PromptMode::DenoiseScore || m == PromptMode::ClmScore;
}

inline bool is_clm_mode(PromptMode m) {
  return m == PromptMode::ClmScore || m == PromptMode::ClmGenerate ||
         m == PromptMode::FidGenerate;
}

inline PromptMode parse_prompt_mode(const std::string& name) {
  if (name == "denoise-score") return PromptMode::DenoiseScore;
  if (name == "denoise-generate") return PromptMode::DenoiseGenerate;
  if (name == "clm-score") return PromptMode::ClmScore;
  if (name == "clm-generate") return PromptMode::ClmGenerate;
  if (name == "fid-generate") return PromptMode::FidGenerate;
  throw ConfigError("icl: unknown mode '" + name + "'");
}

enum class ScoreSpan { OptionOnly, Full };

struct Shot {
  std::string input, output;
};

struct PromptSpec {
  PromptMode mode = PromptMode::ClmScore;
  std::string encoder_template;
  std::string decoder_template;
  std::string shot_template = "{{input}} {{output}}";
  std::string shot_separator = " ";
  std::vector<Shot> shots;
  std::vector<std::string> candidates;
  ScoreSpan score_span = ScoreSpan::OptionOnly;
  bool length_normalize = false;
  std::size_t max_new = 64;
};

inline constexpr const char* kClmMarker = "[CLM] ";

namespace detail {

/// Replaces {{name}} markers from `vars`; any marker left over is an error
/// naming the slot.
inline std::string fill_template(const std::string& text,
                                 const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t i = 0;
  while (i < text.size()) {
    const auto open = text.find("{{", i);
    if (open == std::string::npos) {
      out.append(text, i, std::string::npos);
      break;
    }
    const auto close = text.find("}}", open + 2);
    if (close == std::string::npos) {
      out.append(text, i, std::string::npos);
      break;
    }
    out.append(text, i, open - i);
    const std::string slot = text.substr(open + 2, close - open - 2);
    auto it = vars.find(slot);
    if (it == vars.end())
      throw std::invalid_argument("template: unfilled slot '" + slot + "'");
    out += it->second;
    i = close + 2;
  }
  return out;
}

inline std::string render_shot_block(const PromptSpec& spec, const std::vector<Shot>& shots) {
  std::string block;
  for (std::size_t i = 0; i < shots.size(); ++i) {
    if (i) block += spec.shot_separator;
    block += fill_template(spec.shot_template,
                           {{"input", shots[i].input}, {"output", shots[i].output}});
  }
  return block;
}

inline std::string render_encoder_text(const PromptSpec& spec, const std::string& input,
                                       const std::vector<Shot>& shots, bool score_mode) {
  std::map<std::string, std::string> vars{{"input", input},
                                          {"shots", render_shot_block(spec, shots)}};
  if (score_mode) vars["option"] = "";  // score-mode encoder text omits the answer slot
  std::string text;
  if (!shots.empty() && spec.encoder_template.find("{{shots}}") == std::string::npos)
    text = vars["shots"] + spec.shot_separator + fill_template(spec.encoder_template, vars);
  else
    text = fill_template(spec.encoder_template, vars);
  if (is_clm_mode(spec.mode)) text = kClmMarker + text;
  return text;
}

}  // namespace detail

/// Rendered prompt for one candidate (or for generation, candidate-free).
/// The decoder text is split around the inserted option so that scoring can
/// mask exactly the candidate's tokens.
struct RenderedPrompt {
  std::vector<std::string> encoder_texts;  // one entry, or one per FiD pass
  std::string decoder_prefix, decoder_option, decoder_suffix;

  std::string encoder_text() const { return encoder_texts.front(); }
  std::string decoder_text() const { return decoder_prefix + decoder_option + decoder_suffix; }
};

/// Deterministic text assembly for one example. Score modes substitute the
/// candidate into the decoder template's {{option}} slot and leave it out of
/// the encoder text; CLM-family modes carry a leading "[CLM] " marker; FiD
/// renders one complete 1-shot prompt per exemplar.
inline RenderedPrompt render(const PromptSpec& spec, const std::string& input,
                             const std::string& candidate = std::string()) {
  RenderedPrompt out;
  if (spec.mode == PromptMode::FidGenerate) {
    if (spec.shots.empty())
      throw std::invalid_argument("icl: fid-generate requires at least one shot");
    for (const Shot& shot : spec.shots)
      out.encoder_texts.push_back(detail::render_encoder_text(spec, input, {shot}, false));
  } else {
    out.encoder_texts.push_back(
        detail::render_encoder_text(spec, input, spec.shots, is_score_mode(spec.mode)));
  }

  if (is_score_mode(spec.mode)) {
    const auto slot = spec.decoder_template.find("{{option}}");
    if (slot == std::string::npos)
      throw std::invalid_argument("icl: score-mode decoder template lacks an {{option}} slot");
    const std::map<std::string, std::string> vars{
        {"input", input}, {"shots", detail::render_shot_block(spec, spec.shots)}};
    out.decoder_prefix = detail::fill_template(spec.decoder_template.substr(0, slot), vars);
    out.decoder_option = candidate;
    out.decoder_suffix = detail::fill_template(spec.decoder_template.substr(slot + 10), vars);
  }
  return out;
}

struct EvalResult {
  std::vector<ScoredCandidate> scores;  // score modes
  int chosen = -1;                      // argmin of total loss, ties -> lowest index
  TokenIds generated_ids;               // generate modes
  std::string generated;
};

namespace detail {

/// Translates a leading "[CLM] " text marker into the CLM control token.
inline TokenIds encode_marked(const Vocab& vocab, const std::string& text) {
  const std::string_view marker(kClmMarker);
  if (text.rfind(kClmMarker, 0) == 0) {
    TokenIds ids;
    ids.push_back(vocab.special.clm);
    const TokenIds rest = vocab.encode(text.substr(marker.size()));
    ids.insert(ids.end(), rest.begin(), rest.end());
    return ids;
  }
  return vocab.encode(text);
}

}  // namespace detail

/// Runs one example through the model. Score modes pick the candidate with
/// the lowest teacher-forced cross-entropy over the configured span; generate
/// modes decode greedily (FiD concatenates the per-shot encoder outputs).
template <typename T>
EvalResult evaluate(const PromptSpec& spec, const ModelParams<T>& model, const Vocab& vocab,
                    const std::string& input) {
  const SpecialTokens sp = vocab.specials();
  EvalResult result;
  if (is_score_mode(spec.mode)) {
    if (spec.candidates.size() < 2)
      throw std::invalid_argument("icl: score modes require at least two candidates");
    for (std::size_t c = 0; c < spec.candidates.size(); ++c) {
      const RenderedPrompt rp = render(spec, input, spec.candidates[c]);
      const TokenIds enc = detail::encode_marked(vocab, rp.encoder_text());
      const TokenIds prefix = vocab.encode(rp.decoder_prefix);
      const TokenIds option = vocab.encode(rp.decoder_option);
      const TokenIds suffix = vocab.encode(rp.decoder_suffix);
      if (option.empty())
        throw std::invalid_argument("icl: candidate " + std::to_string(c) +
                                    " tokenizes to an empty sequence");
      TokenIds target = prefix;
      target.insert(target.end(), option.begin(), option.end());
      target.insert(target.end(), suffix.begin(), suffix.end());
      std::vector<std::uint8_t> mask(target.size(),
                                     spec.score_span == ScoreSpan::Full ? 1 : 0);
      if (spec.score_span == ScoreSpan::OptionOnly)
        for (std::size_t t = prefix.size(); t < prefix.size() + option.size(); ++t) mask[t] = 1;
      ScoredCandidate sc = score(model, enc, target, mask, sp);
      sc.candidate_index = c;
      if (spec.length_normalize) sc.total_loss /= static_cast<double>(option.size());
      result.scores.push_back(std::move(sc));
    }
    result.chosen = 0;
    for (std::size_t c = 1; c < result.scores.size(); ++c)
      if (result.scores[c].total_loss <
          result.scores[static_cast<std::size_t>(result.chosen)].total_loss)
        result.chosen = static_cast<int>(c);
  } else {
    const RenderedPrompt rp = render(spec, input);
    std::vector<TokenIds> enc_inputs;
    enc_inputs.reserve(rp.encoder_texts.size());
    for (const std::string& text : rp.encoder_texts)
      enc_inputs.push_back(detail::encode_marked(vocab, text));
    result.generated_ids = generate_greedy(model, enc_inputs, spec.max_new,
                                           spec.mode == PromptMode::FidGenerate, sp);
    result.generated = vocab.decode(result.generated_ids);
  }
  return result;
}

// --- task files ---------------------------------------------------------------

/// One record of a task file: `key: value` lines, blank-line separated,
/// `#` comments; repeated candidate / shot_input / shot_output keys build the
/// lists. Values use \n, \t and \\ escapes.
struct TaskExample {
  std::string encoder_template;
  std::string decoder_template;
  std::string input;
  std::vector<std::string> candidates;
  std::vector<Shot> shots;
  int gold = -1;
};

namespace detail {

inline std::string unescape_value(std::string_view v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (v[i] == '\\' && i + 1 < v.size()) {
      ++i;
      if (v[i] == 'n') out += '\n';
      else if (v[i] == 't') out += '\t';
      else out += v[i];
    } else {
      out += v[i];
    }
  }
  return out;
}

inline std::string escape_value(std::string_view v) {
  std::string out;
  for (char c : v) {
    if (c == '\n') out += "\\n";
    else if (c == '\t') out += "\\t";
    else if (c == '\\') out += "\\\\";
    else out += c;
  }
  return out;
}

}  // namespace detail

inline std::vector<TaskExample> load_task_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot read task file: " + path.string());
  std::vector<TaskExample> examples;
  TaskExample cur;
  bool any_field = false;
  std::string pending_shot_input;
  bool have_shot_input = false;

  auto flush = [&]() {
    if (!any_field) return;
    if (cur.encoder_template.empty())
      throw ConfigError("task file: record " + std::to_string(examples.size()) +
                        " lacks encoder_template");
    if (have_shot_input)
      throw ConfigError("task file: shot_input without shot_output in record " +
                        std::to_string(examples.size()));
    examples.push_back(std::move(cur));
    cur = TaskExample{};
    any_field = false;
  };

  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      flush();
      continue;
    }
    if (line[0] == '#') continue;
    const auto colon = line.find(':');
    if (colon == std::string::npos)
      throw ConfigError("task file: malformed line '" + line + "'");
    std::string key = line.substr(0, colon);
    std::string value = line.substr(colon + 1);
    if (!value.empty() && value.front() == ' ') value.erase(0, 1);
    value = detail::unescape_value(value);
    any_field = true;
    if (key == "encoder_template") cur.encoder_template = value;
    else if (key == "decoder_template") cur.decoder_template = value;
    else if (key == "input") cur.input = value;
    else if (key == "candidate") cur.candidates.push_back(value);
    else if (key == "gold") cur.gold = std::stoi(value);
    else if (key == "shot_input") {
      if (have_shot_input)
        throw ConfigError("task file: consecutive shot_input lines without shot_output");
      pending_shot_input = value;
      have_shot_input = true;
    } else if (key == "shot_output") {
      if (!have_shot_input) throw ConfigError("task file: shot_output without shot_input");
      cur.shots.push_back({pending_shot_input, value});
      have_shot_input = false;
    } else {
      throw ConfigError("task file: unknown key '" + key + "'");
    }
  }
  flush();
  return examples;
}

/// Line-delimited results: one record per example with per-candidate scores
/// (score modes) or the generated text.
inline void write_result_line(std::ostream& os, std::size_t id, const TaskExample& ex,
                              const EvalResult& r) {
  os << "id=" << id;
  if (r.chosen >= 0) {
    os << " chosen=" << r.chosen;
    if (ex.gold >= 0) os << " gold=" << ex.gold << " correct=" << (r.chosen == ex.gold ? 1 : 0);
    os << " scores=";
    for (std::size_t c = 0; c < r.scores.size(); ++c) {
      if (c) os << ";";
      os << r.scores[c].total_loss;
    }
  } else {
    os << " text=" << detail::escape_value(r.generated);
  }
  os << "\n";
}

}  // namespace seq2seq
