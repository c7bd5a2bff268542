// seq2seq-lab: end-to-end driver for the pipeline. Every run is reproducible
// from its config file plus the global seed, and writes a resolved-config
// snapshot beside its outputs.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "seq2seq/config.hpp"
#include "seq2seq/corpus.hpp"
#include "seq2seq/icl.hpp"
#include "seq2seq/memaudit.hpp"
#include "seq2seq/model.hpp"
#include "seq2seq/noising.hpp"
#include "seq2seq/trainer.hpp"
#include "seq2seq/vocab.hpp"

namespace fs = std::filesystem;
using namespace seq2seq;

namespace {

// Derived seed streams, one per pipeline stage.
enum SeedStream : std::uint64_t {
  kSeedSampling = 0,
  kSeedNoising = 1,
  kSeedModelInit = 2,
  kSeedBootstrap = 3,
};

struct Cli {
  std::string config_path;
  std::optional<long long> seed_override;
  std::optional<std::string> output_override;
};

RunConfig load_config(const Cli& cli) {
  RunConfig cfg = RunConfig::load(cli.config_path);
  if (cli.seed_override) cfg.set("", "seed", std::to_string(*cli.seed_override));
  if (cli.output_override) cfg.set("", "output_dir", *cli.output_override);
  return cfg;
}

std::uint64_t global_seed(const RunConfig& cfg) {
  return static_cast<std::uint64_t>(cfg.get_int("", "seed", 0));
}

fs::path output_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.get_str("", "output_dir");
  fs::create_directories(dir);
  return dir;
}

void write_snapshot(const RunConfig& cfg, const fs::path& dir,
                    const std::string& name = "config.txt") {
  std::ofstream os(dir / name, std::ios::binary);
  os << cfg.snapshot();
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot read file: " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

std::vector<SourceSpec> load_sources(const RunConfig& cfg) {
  const long long count = cfg.get_int("corpus", "sources");
  if (count < 1) throw ConfigError("[corpus] sources must be >= 1");
  std::vector<SourceSpec> sources;
  for (long long i = 0; i < count; ++i) {
    const std::string base = "source." + std::to_string(i) + ".";
    SourceSpec s;
    s.name = cfg.get_str("corpus", base + "name");
    s.language = cfg.get_str("corpus", base + "language");
    s.base_weight = cfg.get_double("corpus", base + "weight", 1.0);
    s.spoken_fraction = cfg.get_double("corpus", base + "spoken_fraction", 0.0);
    s.documents = read_lines(cfg.get_str("corpus", base + "path"));
    sources.push_back(std::move(s));
  }
  return sources;
}

std::map<std::string, std::uint64_t> language_counts(const std::vector<SourceSpec>& sources) {
  std::map<std::string, std::uint64_t> counts;
  for (const SourceSpec& s : sources) counts[s.language] += s.documents.size();
  return counts;
}

ModelConfig model_config(const RunConfig& cfg, int vocab_size) {
  ModelConfig mc;
  mc.enc_layers = static_cast<int>(cfg.get_int("model", "enc_layers", 2));
  mc.dec_layers = static_cast<int>(cfg.get_int("model", "dec_layers", 2));
  mc.heads = static_cast<int>(cfg.get_int("model", "heads", 2));
  mc.d_model = static_cast<int>(cfg.get_int("model", "d_model", 64));
  mc.d_ff = static_cast<int>(cfg.get_int("model", "d_ff", 0));
  mc.max_positions = static_cast<int>(cfg.get_int("model", "max_positions", 256));
  mc.vocab_size = static_cast<int>(cfg.get_int("model", "vocab_size", 0));
  mc.tie_embeddings = cfg.get_bool("model", "tie_embeddings", false);
  if (mc.vocab_size == 0) mc.vocab_size = vocab_size;
  return mc;
}

NoisingConfig noising_config(const RunConfig& cfg, const SpecialTokens& sp) {
  NoisingConfig nc;
  nc.drop_ratio = cfg.get_double("noising", "drop_ratio", 0.15);
  nc.span_mean = cfg.get_double("noising", "span_mean", 3.0);
  nc.clm_fraction = cfg.get_double("noising", "clm_fraction", 0.20);
  nc.clm_split_min = cfg.get_double("noising", "clm_split_min", 0.20);
  nc.clm_split_max = cfg.get_double("noising", "clm_split_max", 0.80);
  nc.seed = Rng::derive(global_seed(cfg), kSeedNoising);
  nc.clm_id = sp.clm;
  nc.doc_id = sp.doc;
  nc.validate();
  return nc;
}

TrainConfig train_config(const RunConfig& cfg, TrainMode mode) {
  TrainConfig tc;
  tc.mode = mode;
  const bool ft = mode == TrainMode::Finetune;
  tc.lr_start = cfg.get_double("trainer", "lr_start", ft ? 1e-6 : 1e-4);
  tc.lr_end = cfg.get_double("trainer", "lr_end", ft ? 1e-7 : 5e-6);
  tc.total_steps = cfg.get_int("trainer", "total_steps");
  tc.adam.beta1 = cfg.get_double("trainer", "beta1", 0.9);
  tc.adam.beta2 = cfg.get_double("trainer", "beta2", 0.999);
  tc.adam.eps = cfg.get_double("trainer", "eps", 1e-8);
  tc.weight_decay = cfg.get_double("trainer", "weight_decay", 0.1);
  tc.accumulation = static_cast<int>(cfg.get_int("trainer", "accumulation", 1));
  tc.batch_size = static_cast<int>(cfg.get_int("trainer", "batch_size", 8));
  tc.freeze_encoder_steps = cfg.get_int("trainer", "freeze_encoder_steps", 0);
  tc.checkpoint_every = cfg.get_int("trainer", "checkpoint_every", 0);
  tc.grad_clip = cfg.get_double("trainer", "grad_clip", 0.0);
  tc.halt_after_step = cfg.get_int("trainer", "halt_after_step", 0);
  tc.seed = global_seed(cfg);
  tc.validate();
  return tc;
}

fs::path vocab_path(const RunConfig& cfg) {
  return cfg.get_str("tokenizer", "vocab_path",
                     (fs::path(cfg.get_str("", "output_dir")) / "vocab.txt").string());
}

/// Epoch-capped cycling source over shard records; max_epochs 0 means cycle
/// forever.
std::function<std::optional<TokenIds>()> shard_source(std::vector<TokenIds> records,
                                                      long long max_epochs) {
  auto data = std::make_shared<std::vector<TokenIds>>(std::move(records));
  auto served = std::make_shared<long long>(0);
  return [data, served, max_epochs]() -> std::optional<TokenIds> {
    if (data->empty()) return std::nullopt;
    if (max_epochs > 0 &&
        *served >= max_epochs * static_cast<long long>(data->size()))
      return std::nullopt;
    const TokenIds& rec = (*data)[static_cast<std::size_t>(*served % data->size())];
    ++*served;
    return rec;
  };
}

const std::set<std::string> kAllSections = {"tokenizer", "corpus", "noising", "model",
                                            "trainer",   "icl",    "memaudit"};

std::set<std::string> other_sections(const std::set<std::string>& used) {
  std::set<std::string> out;
  for (const std::string& s : kAllSections)
    if (!used.count(s)) out.insert(s);
  return out;
}

// --- subcommands -----------------------------------------------------------

int cmd_tok_train(const Cli& cli) {
  RunConfig cfg = load_config(cli);
  const fs::path out = output_dir(cfg);
  auto sources = load_sources(cfg);
  const double alpha = cfg.get_double("corpus", "alpha", 0.5);
  const auto weights = language_weights(language_counts(sources), alpha);
  const long long ndocs = cfg.get_int("tokenizer", "train_documents", 1000);
  const auto target_size = static_cast<std::size_t>(cfg.get_int("tokenizer", "target_size"));
  const auto reserved = static_cast<std::uint32_t>(cfg.get_int("tokenizer", "reserved", 32));
  const fs::path vpath = vocab_path(cfg);
  cfg.reject_unknown(other_sections({"tokenizer", "corpus"}));

  SampleStream stream(sources, weights, Rng::derive(global_seed(cfg), kSeedSampling));
  std::vector<std::string> texts;
  texts.reserve(static_cast<std::size_t>(ndocs));
  for (long long i = 0; i < ndocs; ++i) texts.push_back(stream.next().text);
  const Vocab vocab = Vocab::train(texts, target_size, reserved);
  fs::create_directories(vpath.parent_path().empty() ? out : vpath.parent_path());
  vocab.save(vpath);
  write_snapshot(cfg, out);
  std::cout << "trained vocabulary of " << vocab.size() << " entries -> " << vpath.string()
            << "\n";
  return 0;
}

int cmd_prepare(const Cli& cli) {
  RunConfig cfg = load_config(cli);
  const fs::path out = output_dir(cfg);
  const Vocab vocab = Vocab::load(vocab_path(cfg));
  auto sources = load_sources(cfg);
  const double alpha = cfg.get_double("corpus", "alpha", 0.5);
  const auto weights = language_weights(language_counts(sources), alpha);
  const long long ndocs = cfg.get_int("corpus", "num_documents", 1000);
  const auto target_len = static_cast<std::size_t>(cfg.get_int("corpus", "target_len", 128));
  const int ngram = static_cast<int>(cfg.get_int("corpus", "ngram", 13));
  std::optional<BenchmarkNgrams> benchmarks;
  if (cfg.has("corpus", "benchmarks"))
    benchmarks.emplace(read_lines(cfg.get_str("corpus", "benchmarks")), ngram);
  cfg.reject_unknown(other_sections({"tokenizer", "corpus"}));

  SampleStream stream(sources, weights, Rng::derive(global_seed(cfg), kSeedSampling));
  std::vector<TokenIds> docs;
  std::map<std::string, std::size_t> lang_hist;
  std::size_t dropped = 0, spoken = 0, token_count = 0;
  Packer packer(target_len, vocab.special.doc);
  std::vector<TokenIds> packed;
  auto emit = [&](PackedSequence&& p) { packed.push_back(std::move(p.ids)); };

  for (long long i = 0; i < ndocs; ++i) {
    const SampledDoc doc = stream.next();
    if (benchmarks && benchmarks->contaminated(doc.text)) {
      ++dropped;
      continue;
    }
    ++lang_hist[doc.language];
    spoken += doc.spoken ? 1 : 0;
    TokenIds ids = vocab.encode(doc.text);
    if (ids.empty()) continue;
    token_count += ids.size();
    packer.add(ids, doc.language, emit);
    docs.push_back(std::move(ids));
  }
  packer.flush(emit);

  const fs::path shard_dir = out / "shards";
  fs::create_directories(shard_dir);
  write_shard(shard_dir / "packed.bin", packed);
  write_shard(shard_dir / "docs.bin", docs);

  std::ofstream meta(out / "metadata.txt", std::ios::binary);
  meta << "seed=" << global_seed(cfg) << "\n";
  meta << "alpha=" << alpha << "\n";
  for (const auto& [lang, q] : weights.q) meta << "weight." << lang << "=" << q << "\n";
  for (std::size_t i = 0; i < sources.size(); ++i)
    meta << "source." << i << "=" << sources[i].name << " language=" << sources[i].language
         << " weight=" << sources[i].base_weight
         << " spoken_fraction=" << sources[i].spoken_fraction
         << " documents=" << sources[i].documents.size() << "\n";
  meta << "sampled=" << ndocs << "\n";
  meta << "dropped=" << dropped << "\n";
  meta << "kept=" << docs.size() << "\n";
  meta << "spoken=" << spoken << "\n";
  for (const auto& [lang, n] : lang_hist) meta << "lang." << lang << "=" << n << "\n";
  meta << "packed_sequences=" << packed.size() << "\n";
  meta << "tokens=" << token_count << "\n";
  write_snapshot(cfg, out);
  std::cout << "prepared " << docs.size() << " documents (" << dropped << " dropped) into "
            << packed.size() << " packed sequences -> " << shard_dir.string() << "\n";
  return 0;
}

int cmd_train(const Cli& cli, const std::string& resume_dir, bool finetune) {
  RunConfig cfg = load_config(cli);
  const fs::path out = output_dir(cfg);
  const Vocab vocab = Vocab::load(vocab_path(cfg));
  const SpecialTokens sp = vocab.specials();
  const ModelConfig mc = model_config(cfg, static_cast<int>(vocab.size()));
  const NoisingConfig nc = noising_config(cfg, sp);
  TrainConfig tc = train_config(cfg, finetune ? TrainMode::Finetune : TrainMode::Pretrain);
  const fs::path data_dir = cfg.get_str("trainer", "data_dir", (out / "shards").string());
  const long long max_epochs = cfg.get_int("trainer", "max_epochs", 0);
  const std::string encoder_init = cfg.get_str("model", "encoder_init", "");
  const std::string init_from = cfg.get_str("trainer", "init_from", "");
  cfg.reject_unknown(other_sections({"tokenizer", "noising", "model", "trainer"}));
  if (finetune && init_from.empty() && resume_dir.empty())
    throw ConfigError("[trainer] init_from is required for finetune");

  std::vector<TokenIds> packed = read_shard(data_dir / "packed.bin");
  std::vector<TokenIds> docs = read_shard(data_dir / "docs.bin");
  if (packed.empty() || docs.empty())
    throw ConfigError("training shards in " + data_dir.string() + " are empty");
  ObjectiveMixer mixer(shard_source(std::move(packed), max_epochs),
                       shard_source(std::move(docs), max_epochs), nc);

  ModelParams<float> model;
  OptimizerState<float> opt;
  TrainerCounters counters;
  if (!resume_dir.empty()) {
    const fs::path dir(resume_dir);
    model = load_model<float>(dir / "model.bin");
    opt = load_optimizer<float>(dir / "optimizer.bin", model);
    counters = load_counters(dir / "rng.txt");
  } else if (!init_from.empty()) {
    model = load_model<float>(init_from);
    opt = make_optimizer_state(model);
  } else if (!encoder_init.empty()) {
    const ModelParams<float> enc_src = load_model<float>(encoder_init);
    model = init_params<float>(mc, Rng::derive(tc.seed, kSeedModelInit), &enc_src);
    opt = make_optimizer_state(model);
  } else {
    model = init_params<float>(mc, Rng::derive(tc.seed, kSeedModelInit));
    opt = make_optimizer_state(model);
  }

  write_snapshot(cfg, out);
  auto result = train<float>(
      model, [&]() { return mixer.next(); }, tc, sp, out, cfg.snapshot(), &opt, &counters);
  std::cout << "trained " << result.steps_done << " steps, loss " << result.initial_loss
            << " -> " << result.final_loss << (result.partial ? " (partial: data exhausted)" : "")
            << ", checkpoint " << result.last_checkpoint.string() << "\n";
  return 0;
}

ModelParams<float> load_checkpoint_model(const std::string& path) {
  fs::path p(path);
  if (fs::is_directory(p)) p /= "model.bin";
  return load_model<float>(p);
}

/// Picks the newest step_* checkpoint under <output_dir>.
std::string default_checkpoint(const RunConfig& cfg) {
  const fs::path out = cfg.get_str("", "output_dir");
  std::string best;
  if (fs::exists(out)) {
    for (const auto& entry : fs::directory_iterator(out)) {
      const std::string name = entry.path().filename().string();
      if (entry.is_directory() && name.rfind("step_", 0) == 0 && name > best) best = name;
    }
  }
  if (best.empty()) throw FileError("no checkpoint found under " + out.string());
  return (out / best).string();
}

int cmd_eval(const Cli& cli, const std::string& task_path, std::string checkpoint,
             std::string mode_name, const std::string& out_name, bool fid, long long shots_k,
             bool generate) {
  RunConfig cfg = load_config(cli);
  const fs::path out = output_dir(cfg);
  const Vocab vocab = Vocab::load(vocab_path(cfg));
  if (mode_name.empty())
    mode_name = cfg.get_str("icl", "mode", generate ? "clm-generate" : "clm-score");
  PromptMode mode = parse_prompt_mode(mode_name);
  if (fid) mode = PromptMode::FidGenerate;
  if (generate && is_score_mode(mode))
    throw ConfigError("generate: mode '" + mode_name + "' is a scoring mode");
  if (!generate && !is_score_mode(mode))
    throw ConfigError("score: mode '" + mode_name + "' is not a scoring mode");
  if (checkpoint.empty()) checkpoint = cfg.get_str("icl", "checkpoint", "");
  if (checkpoint.empty()) checkpoint = default_checkpoint(cfg);

  PromptSpec base;
  base.mode = mode;
  base.score_span = cfg.get_str("icl", "score_span", "option") == "full" ? ScoreSpan::Full
                                                                         : ScoreSpan::OptionOnly;
  base.length_normalize = cfg.get_bool("icl", "length_normalize", false);
  base.max_new = static_cast<std::size_t>(cfg.get_int("icl", "max_new", 64));
  base.shot_template = cfg.get_str("icl", "shot_template", "{{input}} {{output}}");
  base.shot_separator = cfg.get_str("icl", "shot_separator", " ");
  cfg.reject_unknown(other_sections({"tokenizer", "icl"}));

  const ModelParams<float> model = load_checkpoint_model(checkpoint);
  const auto examples = load_task_file(task_path);
  const fs::path results_path = out / out_name;
  std::ofstream results(results_path, std::ios::binary);
  if (!results) throw FileError("cannot write results: " + results_path.string());

  std::size_t correct = 0, graded = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const TaskExample& ex = examples[i];
    PromptSpec spec = base;
    spec.encoder_template = ex.encoder_template;
    spec.decoder_template = ex.decoder_template;
    spec.candidates = ex.candidates;
    spec.shots = ex.shots;
    if (shots_k >= 0 && spec.shots.size() > static_cast<std::size_t>(shots_k))
      spec.shots.resize(static_cast<std::size_t>(shots_k));
    const EvalResult r = evaluate(spec, model, vocab, ex.input);
    write_result_line(results, i, ex, r);
    if (r.chosen >= 0 && ex.gold >= 0) {
      ++graded;
      correct += r.chosen == ex.gold ? 1 : 0;
    }
  }
  write_snapshot(cfg, out);
  std::cout << "evaluated " << examples.size() << " examples -> " << results_path.string();
  if (graded > 0)
    std::cout << " accuracy=" << static_cast<double>(correct) / static_cast<double>(graded)
              << " (" << correct << "/" << graded << ")";
  std::cout << "\n";
  return 0;
}

int cmd_mem_audit(const Cli& cli, std::string checkpoint) {
  RunConfig cfg = load_config(cli);
  const fs::path out = output_dir(cfg);
  const Vocab vocab = Vocab::load(vocab_path(cfg));
  const SpecialTokens sp = vocab.specials();
  const fs::path data_dir = cfg.get_str("memaudit", "data_dir", (out / "shards").string());
  BinLimits limits;
  limits.max_per_bin = static_cast<std::size_t>(cfg.get_int("memaudit", "max_per_bin", 2000));
  limits.min_per_bin = static_cast<std::size_t>(cfg.get_int("memaudit", "min_per_bin", 50));
  const auto resamples = static_cast<std::size_t>(cfg.get_int("memaudit", "resamples", 100));
  if (checkpoint.empty()) checkpoint = cfg.get_str("memaudit", "checkpoint", "");
  if (checkpoint.empty()) checkpoint = default_checkpoint(cfg);
  cfg.reject_unknown(other_sections({"tokenizer", "memaudit"}));

  const ModelParams<float> model = load_checkpoint_model(checkpoint);
  const std::vector<TokenIds> docs = read_shard(data_dir / "docs.bin");
  if (docs.empty()) throw ConfigError("mem-audit: no documents in " + data_dir.string());
  const SuffixIndex index = SuffixIndex::build(docs);
  const auto freq_bins = build_frequency_bins(index, docs, limits);
  const auto len_bins = build_length_bins(index, docs, limits);

  MemorizationReport report;
  Rng rng(Rng::derive(global_seed(cfg), kSeedBootstrap));
  for (const FreqBin& bin : freq_bins) {
    append_bootstrap_row(report, "frequency", "clm", bin.n, bin.lo,
                         probe_clm(model, sp, bin.members).outcomes, resamples, rng);
    append_bootstrap_row(report, "frequency", "denoise", bin.n, bin.lo,
                         probe_denoise(model, sp, bin.members).outcomes, resamples, rng);
  }
  for (const LenBin& bin : len_bins) {
    append_bootstrap_row(report, "length", "clm", bin.m, static_cast<double>(bin.center),
                         probe_clm(model, sp, bin.members).outcomes, resamples, rng);
    append_bootstrap_row(report, "length", "denoise", bin.m, static_cast<double>(bin.center),
                         probe_denoise(model, sp, bin.members).outcomes, resamples, rng);
  }
  write_report(report, out / "memorization_report.txt", out / "memorization_plot.txt");
  write_snapshot(cfg, out);
  std::cout << "memorization audit: " << report.rows.size() << " bins reported, "
            << report.diagnostics.size() << " omitted -> "
            << (out / "memorization_report.txt").string() << "\n";
  return 0;
}

int cmd_inspect_pairs(const Cli& cli, long long count) {
  RunConfig cfg = load_config(cli);
  const fs::path out = output_dir(cfg);
  const Vocab vocab = Vocab::load(vocab_path(cfg));
  const NoisingConfig nc = noising_config(cfg, vocab.specials());
  const fs::path data_dir = cfg.get_str("trainer", "data_dir", (out / "shards").string());
  cfg.reject_unknown(other_sections({"tokenizer", "noising", "trainer"}));

  ObjectiveMixer mixer(shard_source(read_shard(data_dir / "packed.bin"), 0),
                       shard_source(read_shard(data_dir / "docs.bin"), 0), nc);
  for (long long i = 0; i < count; ++i) {
    auto pair = mixer.next();
    if (!pair) break;
    std::cout << "pair " << i << " kind=" << (pair->kind == TaskKind::Clm ? "clm" : "denoise")
              << " enc_len=" << pair->encoder_ids.size()
              << " target_len=" << pair->decoder_target_ids.size() << "\n";
    std::cout << "  encoder: " << vocab.decode(pair->encoder_ids) << "\n";
    std::cout << "  target:  " << vocab.decode(pair->decoder_target_ids) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"seq2seq pre-training lab"};
  app.require_subcommand(1);
  Cli cli;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", cli.config_path, "config file")->required();
    cmd->add_option("--seed", cli.seed_override, "override the global seed");
    cmd->add_option("--output-dir", cli.output_override, "override the output directory");
  };

  auto* tok = app.add_subcommand("tok-train", "train the subword vocabulary");
  add_common(tok);

  auto* prepare = app.add_subcommand(
      "prepare", "sample, format, decontaminate and pack the training shards");
  add_common(prepare);

  std::string resume_dir;
  auto* train_cmd = app.add_subcommand("train", "run the pre-training loop");
  add_common(train_cmd);
  train_cmd->add_option("--resume", resume_dir, "checkpoint directory to resume from");

  auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune in CLM mode");
  add_common(finetune_cmd);
  finetune_cmd->add_option("--resume", resume_dir, "checkpoint directory to resume from");

  std::string task_path, checkpoint, mode_name, out_name_score = "results.txt",
                                                out_name_gen = "generations.txt";
  auto* score_cmd = app.add_subcommand("score", "rank candidates by decoder cross-entropy");
  add_common(score_cmd);
  score_cmd->add_option("--task", task_path, "task file")->required();
  score_cmd->add_option("--checkpoint", checkpoint, "model checkpoint (file or directory)");
  score_cmd->add_option("--mode", mode_name, "denoise-score | clm-score");
  score_cmd->add_option("--out", out_name_score, "results file name inside the output dir");

  bool fid = false;
  long long shots_k = -1;
  auto* gen_cmd = app.add_subcommand("generate", "greedy generation");
  add_common(gen_cmd);
  gen_cmd->add_option("--task", task_path, "task file")->required();
  gen_cmd->add_option("--checkpoint", checkpoint, "model checkpoint (file or directory)");
  gen_cmd->add_option("--mode", mode_name, "denoise-generate | clm-generate | fid-generate");
  gen_cmd->add_flag("--fid", fid, "fusion-in-decoder multi-shot generation");
  gen_cmd->add_option("--shots", shots_k, "use at most this many shots per example");
  gen_cmd->add_option("--out", out_name_gen, "results file name inside the output dir");

  auto* audit_cmd = app.add_subcommand("mem-audit", "memorization audit");
  add_common(audit_cmd);
  audit_cmd->add_option("--checkpoint", checkpoint, "model checkpoint (file or directory)");

  long long pair_count = 10;
  auto* inspect_cmd = app.add_subcommand("inspect-pairs", "dump noised training pairs as text");
  add_common(inspect_cmd);
  inspect_cmd->add_option("--count", pair_count, "number of pairs to dump");

  CLI11_PARSE(app, argc, argv);

  try {
    if (tok->parsed()) return cmd_tok_train(cli);
    if (prepare->parsed()) return cmd_prepare(cli);
    if (train_cmd->parsed()) return cmd_train(cli, resume_dir, false);
    if (finetune_cmd->parsed()) return cmd_train(cli, resume_dir, true);
    if (score_cmd->parsed())
      return cmd_eval(cli, task_path, checkpoint, mode_name, out_name_score, false, -1, false);
    if (gen_cmd->parsed())
      return cmd_eval(cli, task_path, checkpoint, mode_name, out_name_gen, fid, shots_k, true);
    if (audit_cmd->parsed()) return cmd_mem_audit(cli, checkpoint);
    if (inspect_cmd->parsed()) return cmd_inspect_pairs(cli, pair_count);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const FileError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
