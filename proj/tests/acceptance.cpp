// Acceptance suite: every criterion below runs at its stated tolerance and
// prints one PASS/FAIL line. The process exits nonzero if any criterion
// fails.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "seq2seq/corpus.hpp"
#include "seq2seq/icl.hpp"
#include "seq2seq/memaudit.hpp"
#include "seq2seq/model.hpp"
#include "seq2seq/noising.hpp"
#include "seq2seq/rng.hpp"
#include "seq2seq/trainer.hpp"
#include "seq2seq/vocab.hpp"

namespace fs = std::filesystem;
using namespace seq2seq;

namespace {

TokenIds random_ids(Rng& rng, std::size_t len, std::uint32_t vocab = 64) {
  TokenIds ids(len);
  for (auto& id : ids) id = 5 + static_cast<std::uint32_t>(rng.next_index(vocab - 5));
  return ids;
}

// ---- criterion 1: gradient exactness ---------------------------------------

double forward_loss(const ModelParams<double>& p, const Batch& b) {
  const auto logits = forward(p, b);
  double sum = 0;
  std::size_t active = 0;
  for (std::size_t r = 0; r < b.size(); ++r)
    for (std::size_t t = 0; t < b.target_ids[r].size(); ++t) {
      if (!b.loss_mask[r][t]) continue;
      const auto row = static_cast<Eigen::Index>(t);
      const double m = logits[r].row(row).maxCoeff();
      sum += m + std::log((logits[r].row(row).array() - m).exp().sum()) -
             logits[r](row, b.target_ids[r][t]);
      ++active;
    }
  return sum / static_cast<double>(active);
}

bool criterion_gradients(std::string& detail) {
  ModelConfig cfg;
  cfg.enc_layers = 2;
  cfg.dec_layers = 2;
  cfg.heads = 2;
  cfg.d_model = 8;
  cfg.max_positions = 16;
  cfg.vocab_size = 64;
  auto p = init_params<double>(cfg, 42);

  Rng rng(43);
  NoisedPair a, b;
  a.encoder_ids = random_ids(rng, 7);
  a.decoder_target_ids = random_ids(rng, 9);
  b.encoder_ids = random_ids(rng, 5);
  b.decoder_target_ids = random_ids(rng, 6);
  std::vector<NoisedPair> pairs{a, b};
  const Batch batch = make_batch(pairs, SpecialTokens{});

  const auto analytic = loss_and_grads(p, batch);
  const double eps = 1e-4;
  double worst = 0;
  auto params = enumerate_params(p);
  auto grads = enumerate_params(analytic.grads);
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i].size(); ++k) {
      const double orig = params[i].data[k];
      params[i].data[k] = orig + eps;
      const double up = forward_loss(p, batch);
      params[i].data[k] = orig - eps;
      const double down = forward_loss(p, batch);
      params[i].data[k] = orig;
      const double fd = (up - down) / (2 * eps);
      const double an = grads[i].data[k];
      // 1e-3 floor: keeps O(eps^2) differencing noise off vanishing gradients
      worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-3}));
    }
  std::ostringstream os;
  os << "max_rel_err=" << worst << " over " << p.parameter_count() << " parameters";
  detail = os.str();
  return worst < 1e-4;
}

// ---- criterion 2: objective mixture fidelity --------------------------------

bool criterion_mixture(std::string& detail) {
  Rng data_rng(7);
  std::vector<TokenIds> packed, docs;
  for (int i = 0; i < 64; ++i) packed.push_back(random_ids(data_rng, 10 + data_rng.next_index(90)));
  for (int i = 0; i < 64; ++i) docs.push_back(random_ids(data_rng, 5 + data_rng.next_index(60)));
  NoisingConfig cfg;  // paper defaults: 0.15 drop, Poisson(3), 20% CLM
  cfg.seed = 2024;
  ObjectiveMixer mixer(cycle_records(packed), cycle_records(docs), cfg);

  const int n = 50000;
  int clm = 0;
  for (int i = 0; i < n; ++i) {
    const auto pair = mixer.next();
    if (!pair) return false;
    if (pair->kind == TaskKind::Clm) {
      ++clm;
    } else {
      const std::size_t len = pair->decoder_target_ids.size();
      const auto drop = static_cast<std::size_t>(0.15 * static_cast<double>(len));
      if (pair->encoder_ids.size() != len - drop) {
        detail = "denoise drop count mismatch at pair " + std::to_string(i);
        return false;
      }
    }
  }
  const double share = static_cast<double>(clm) / n;
  std::ostringstream os;
  os << "clm_share=" << share << ", every denoise pair dropped floor(0.15*len) tokens";
  detail = os.str();
  return share > 0.19 && share < 0.21;
}

// ---- criterion 3: Eq. 1 sampling --------------------------------------------

bool criterion_sampling(std::string& detail) {
  const auto w = language_weights({{"A", 100}, {"B", 1}}, 0.5);
  SourceSpec a, b;
  a.name = a.language = "A";
  b.name = b.language = "B";
  for (int i = 0; i < 100; ++i) a.documents.push_back("a" + std::to_string(i));
  b.documents.push_back("b0");
  SampleStream stream({a, b}, w, 777);
  const int n = 100000;
  std::map<std::string, int> hist;
  for (int i = 0; i < n; ++i) ++hist[stream.next().language];
  double chi2 = 0;
  for (const auto& [lang, q] : w.q) {
    const double expected = q * n;
    const double diff = hist[lang] - expected;
    chi2 += diff * diff / expected;
  }
  std::ostringstream os;
  os << "chi2=" << chi2 << " vs 6.635 (p=0.01, 1 dof), q=(10/11, 1/11)";
  detail = os.str();
  return chi2 < 6.635;
}

// ---- criteria 4 and 5: overfit integration + scoring ------------------------

struct OverfitFixture {
  Vocab vocab;
  ModelParams<float> model;
  std::vector<std::string> docs;
  double initial_loss = 0, final_loss = 0;
  bool trained = false;
};

OverfitFixture& overfit_fixture() {
  static OverfitFixture fx = [] {
    OverfitFixture f;
    Rng rng(11);
    for (int d = 0; d < 50; ++d) {
      std::string doc;
      const std::size_t len = 10 + rng.next_index(5);
      for (std::size_t i = 0; i < len; ++i)
        doc += static_cast<char>('a' + rng.next_index(10));
      f.docs.push_back(doc);
    }
    f.vocab = Vocab::train(f.docs, 261, 0);  // byte-level, no merges

    std::vector<TokenIds> encoded;
    for (const std::string& d : f.docs) encoded.push_back(f.vocab.encode(d));

    ModelConfig mc;
    mc.enc_layers = 2;
    mc.dec_layers = 2;
    mc.heads = 2;
    mc.d_model = 32;
    mc.max_positions = 64;
    mc.vocab_size = static_cast<int>(f.vocab.size());
    f.model = init_params<float>(mc, 12);

    NoisingConfig nc;
    nc.drop_ratio = 0.0;  // copy objective for the denoise stream
    nc.clm_fraction = 0.2;
    nc.seed = 13;
    nc.clm_id = f.vocab.special.clm;
    nc.doc_id = f.vocab.special.doc;
    ObjectiveMixer mixer(cycle_records(encoded), cycle_records(encoded), nc);

    TrainConfig tc;
    tc.lr_start = 3e-3;
    tc.lr_end = 1e-3;
    tc.total_steps = 600;
    tc.batch_size = 10;
    tc.weight_decay = 0.0;
    const auto result = train<float>(
        f.model, [&]() { return mixer.next(); }, tc, f.vocab.specials(), {}, "");
    f.initial_loss = result.initial_loss;
    f.final_loss = result.final_loss;
    f.trained = result.steps_done == tc.total_steps;
    return f;
  }();
  return fx;
}

bool criterion_overfit(std::string& detail) {
  auto& fx = overfit_fixture();
  if (!fx.trained) {
    detail = "training did not complete";
    return false;
  }
  int exact = 0;
  for (const std::string& doc : fx.docs) {
    const TokenIds ids = fx.vocab.encode(doc);
    const TokenIds gen =
        generate_greedy(fx.model, {ids}, ids.size() + 2, false, fx.vocab.specials());
    exact += gen == ids ? 1 : 0;
  }
  std::ostringstream os;
  os << "loss " << fx.initial_loss << " -> " << fx.final_loss << ", exact_match=" << exact << "/"
     << fx.docs.size();
  detail = os.str();
  return fx.final_loss < 0.1 * fx.initial_loss &&
         exact == static_cast<int>(fx.docs.size());
}

bool criterion_scoring(std::string& detail) {
  auto& fx = overfit_fixture();
  Rng rng(14);
  auto perturb = [&](const std::string& text) {
    std::string out = text;
    const std::size_t pos = rng.next_index(out.size());
    char replacement;
    do {
      replacement = static_cast<char>('a' + rng.next_index(10));
    } while (replacement == out[pos]);
    out[pos] = replacement;
    return out;
  };

  int denoise_correct = 0, clm_correct = 0;
  for (const std::string& doc : fx.docs) {
    // 16-option denoise scoring: gold document among corrupted variants
    PromptSpec den;
    den.mode = PromptMode::DenoiseScore;
    den.encoder_template = "{{input}}";
    den.decoder_template = "{{option}}";
    den.candidates.push_back(doc);
    while (den.candidates.size() < 16) den.candidates.push_back(perturb(doc));
    const auto dr = evaluate(den, fx.model, fx.vocab, doc);
    denoise_correct += dr.chosen == 0 ? 1 : 0;

    // 16-option CLM scoring: gold continuation among corrupted suffixes
    const std::size_t cut = doc.size() / 2;
    const std::string prefix = doc.substr(0, cut);
    const std::string suffix = doc.substr(cut);
    PromptSpec clm;
    clm.mode = PromptMode::ClmScore;
    clm.encoder_template = "{{input}}";
    clm.decoder_template = "{{option}}";
    clm.candidates.push_back(suffix);
    while (clm.candidates.size() < 16) clm.candidates.push_back(perturb(suffix));
    const auto cr = evaluate(clm, fx.model, fx.vocab, prefix);
    clm_correct += cr.chosen == 0 ? 1 : 0;
  }
  std::ostringstream os;
  os << "denoise_score=" << denoise_correct << "/50, clm_score=" << clm_correct << "/50";
  detail = os.str();
  return denoise_correct == 50 && clm_correct == 50;
}

// ---- criterion 6: FiD degeneration ------------------------------------------

bool criterion_fid(std::string& detail) {
  ModelConfig mc;
  mc.enc_layers = 2;
  mc.dec_layers = 2;
  mc.heads = 2;
  mc.d_model = 32;
  mc.max_positions = 64;
  mc.vocab_size = 64;
  const auto model = init_params<float>(mc, 21);
  Rng rng(22);
  for (int t = 0; t < 100; ++t) {
    const TokenIds prompt = random_ids(rng, 1 + rng.next_index(16));
    const TokenIds std_gen = generate_greedy(model, {prompt}, 12, false, SpecialTokens{});
    const TokenIds fid_gen = generate_greedy(model, {prompt}, 12, true, SpecialTokens{});
    if (std_gen != fid_gen) {
      detail = "divergence at prompt " + std::to_string(t);
      return false;
    }
  }
  detail = "100/100 prompts bit-identical";
  return true;
}

// ---- criterion 7: memorization trend -----------------------------------------

bool criterion_memorization_trend(std::string& detail) {
  const std::array<std::size_t, 4> duplication = {1, 4, 16, 64};
  const std::size_t docs_per_family = 60;
  const std::size_t doc_len = 64;

  Rng rng(31);
  std::vector<TokenIds> corpus;
  for (std::size_t k : duplication) {
    for (std::size_t d = 0; d < docs_per_family; ++d) {
      const TokenIds doc = random_ids(rng, doc_len);
      for (std::size_t r = 0; r < k; ++r) corpus.push_back(doc);
    }
  }
  // deterministic shuffle so duplicates spread over the stream
  for (std::size_t i = corpus.size(); i > 1; --i)
    std::swap(corpus[i - 1], corpus[rng.next_index(i)]);

  ModelConfig mc;
  mc.enc_layers = 2;
  mc.dec_layers = 2;
  mc.heads = 4;
  mc.d_model = 64;
  mc.max_positions = 128;
  mc.vocab_size = 64;
  auto model = init_params<float>(mc, 32);

  NoisingConfig nc;  // paper defaults: 80/20 mixture
  nc.seed = 33;
  ObjectiveMixer mixer(cycle_records(corpus), cycle_records(corpus), nc);

  TrainConfig tc;  // fixed token budget: steps * batch * ~doc_len tokens
  tc.lr_start = 1e-3;
  tc.lr_end = 3e-4;
  tc.total_steps = 3000;
  tc.batch_size = 8;
  tc.weight_decay = 0.0;
  TrainerCounters counters;
  train<float>(model, [&]() { return mixer.next(); }, tc, SpecialTokens{}, {}, "", nullptr,
               &counters);

  const SuffixIndex index = SuffixIndex::build(corpus);
  auto bins = build_frequency_bins(index, corpus);
  std::sort(bins.begin(), bins.end(),
            [](const FreqBin& a, const FreqBin& b) { return a.n < b.n; });
  if (bins.size() != duplication.size()) {
    detail = "expected 4 frequency bins, got " + std::to_string(bins.size());
    return false;
  }

  Rng boot(34);
  std::vector<double> means;
  std::ostringstream os;
  os << "tokens=" << counters.tokens_seen << " rates:";
  for (const FreqBin& bin : bins) {
    const auto outcome = probe_clm(model, SpecialTokens{}, bin.members);
    const auto [mean, sd] = bootstrap_rate(outcome.outcomes, 100, boot);
    means.push_back(mean);
    os << " n" << bin.n << "=" << mean;
  }
  detail = os.str();
  for (std::size_t i = 1; i < means.size(); ++i)
    if (means[i] < means[i - 1]) return false;
  return true;
}

// ---- criterion 8: suffix array oracle -----------------------------------------

bool criterion_suffix_oracle(std::string& detail) {
  Rng rng(41);
  std::vector<TokenIds> docs;
  for (int d = 0; d < 100; ++d) docs.push_back(random_ids(rng, 100, 12));
  const SuffixIndex index = SuffixIndex::build(docs);

  auto brute = [&](const TokenIds& query) {
    std::size_t count = 0;
    for (const TokenIds& doc : docs) {
      if (query.size() > doc.size()) continue;
      for (std::size_t i = 0; i + query.size() <= doc.size(); ++i)
        if (std::equal(query.begin(), query.end(), doc.begin() + i)) ++count;
    }
    return count;
  };
  for (int q = 0; q < 1000; ++q) {
    TokenIds query;
    if (q % 2 == 0) {
      const TokenIds& doc = docs[rng.next_index(docs.size())];
      const std::size_t len = 1 + rng.next_index(6);
      const std::size_t start = rng.next_index(doc.size() - len);
      query.assign(doc.begin() + start, doc.begin() + start + len);
    } else {
      query = random_ids(rng, 1 + rng.next_index(6), 12);
    }
    if (index.count_occurrences(query) != brute(query)) {
      detail = "count mismatch on query " + std::to_string(q);
      return false;
    }
  }

  const std::map<std::size_t, int> expected_freq = {{1, 0}, {2, 4}, {3, 6}, {5, 9}, {8, 12}};
  for (const auto& [count, bin] : expected_freq)
    if (frequency_bin(count) != bin) {
      detail = "frequency bin mismatch for count " + std::to_string(count);
      return false;
    }
  const std::map<std::size_t, int> expected_len = {{80, 0}, {110, 0}, {160, 1}, {540, 9}};
  for (const auto& [len, bin] : expected_len)
    if (!length_bin(len) || *length_bin(len) != bin) {
      detail = "length bin mismatch for length " + std::to_string(len);
      return false;
    }
  detail = "1000/1000 counts exact; bins for counts {1,2,3,5,8} = {0,4,6,9,12}, "
           "lengths {80,110,160,540} = {0,0,1,9}";
  return true;
}

// ---- criterion 9: decontamination ---------------------------------------------

bool criterion_decontamination(std::string& detail) {
  const std::string planted =
      "alpha beta gamma delta epsilon zeta eta theta iota kappa lambda mu nu";
  const std::vector<std::string> benchmarks = {"Benchmark preamble.\n" + planted,
                                               "unrelated short benchmark"};
  std::vector<std::string> docs;
  for (int i = 0; i < 100; ++i) {
    std::string doc = "ordinary training document " + std::to_string(i) + " stays clean.";
    if (i % 10 == 7) doc += "\nQuoted: " + planted + " end of quote.";
    docs.push_back(doc);
  }
  const auto result = decontaminate(docs, benchmarks, 13);
  BenchmarkNgrams set(benchmarks, 13);
  std::size_t survivors_hit = 0;
  for (const std::string& doc : result.kept) survivors_hit += set.contaminated(doc) ? 1 : 0;
  std::ostringstream os;
  os << "dropped=" << result.dropped_count << "/100, contaminated survivors=" << survivors_hit;
  detail = os.str();
  return result.dropped_count == 10 && survivors_hit == 0;
}

// ---- criterion 10: end-to-end determinism via the CLI --------------------------

struct CliRun {
  int exit_code;
  std::string output;
};

CliRun run_cli(const std::string& args) {
  const std::string cmd = std::string(SEQ2SEQ_CLI_PATH) + " " + args + " 2>&1";
  std::array<char, 4096> buf{};
  CliRun r{-1, {}};
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) r.output.append(buf.data(), n);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string toy_config(const fs::path& vocab, const fs::path& out, long long steps,
                       long long halt) {
  const fs::path data = fs::path(SEQ2SEQ_SOURCE_DIR) / "data" / "toy";
  std::ostringstream os;
  os << "seed = 4242\noutput_dir = " << out.string() << "\n"
     << "[tokenizer]\nvocab_path = " << vocab.string()
     << "\ntarget_size = 300\nreserved = 8\ntrain_documents = 200\n"
     << "[corpus]\nalpha = 0.5\ntarget_len = 48\nnum_documents = 300\nsources = 3\n";
  const char* langs[3] = {"en", "fr", "de"};
  for (int i = 0; i < 3; ++i)
    os << "source." << i << ".name = toy_" << langs[i] << "\nsource." << i
       << ".language = " << langs[i] << "\nsource." << i << ".path = "
       << (data / (std::string(langs[i]) + ".txt")).string() << "\nsource." << i
       << ".weight = 1\nsource." << i << ".spoken_fraction = 0.7\n";
  os << "[model]\nenc_layers = 1\ndec_layers = 1\nheads = 2\nd_model = 16\nmax_positions = 64\n"
     << "[trainer]\ntotal_steps = " << steps << "\nbatch_size = 2\ncheckpoint_every = 57\n";
  if (halt > 0) os << "halt_after_step = " << halt << "\n";
  return os.str();
}

bool criterion_determinism(std::string& detail) {
  const fs::path base = fs::temp_directory_path() / "seq2seq_acceptance";
  fs::remove_all(base);
  fs::create_directories(base);
  const fs::path vocab = base / "vocab.txt";
  auto write_cfg = [&](const std::string& name, const std::string& text) {
    const fs::path p = base / name;
    std::ofstream os(p, std::ios::binary);
    os << text;
    return p;
  };
  const auto cfg_a = write_cfg("a.cfg", toy_config(vocab, base / "a", 100, 0));
  const auto cfg_b = write_cfg("b.cfg", toy_config(vocab, base / "b", 100, 0));
  const auto cfg_h = write_cfg("h.cfg", toy_config(vocab, base / "h", 100, 57));
  const auto cfg_r = write_cfg("r.cfg", toy_config(vocab, base / "h", 100, 0));

  for (const std::string& cmd :
       {"tok-train -c " + cfg_a.string(), "prepare -c " + cfg_a.string(),
        "prepare -c " + cfg_b.string(), "train -c " + cfg_a.string(),
        "train -c " + cfg_b.string(), "prepare -c " + cfg_h.string(),
        "train -c " + cfg_h.string()}) {
    const CliRun r = run_cli(cmd);
    if (r.exit_code != 0) {
      detail = "command failed: " + cmd + " -> " + r.output;
      return false;
    }
  }
  if (file_bytes(base / "a/shards/packed.bin") != file_bytes(base / "b/shards/packed.bin") ||
      file_bytes(base / "a/shards/docs.bin") != file_bytes(base / "b/shards/docs.bin")) {
    detail = "shards differ between identical runs";
    return false;
  }
  if (file_bytes(base / "a/step_000100/model.bin") !=
          file_bytes(base / "b/step_000100/model.bin") ||
      file_bytes(base / "a/step_000100/optimizer.bin") !=
          file_bytes(base / "b/step_000100/optimizer.bin")) {
    detail = "checkpoints differ between identical runs";
    return false;
  }
  if (!fs::exists(base / "h/step_000057/model.bin")) {
    detail = "halted run left no step-57 checkpoint";
    return false;
  }
  const CliRun resumed =
      run_cli("train -c " + cfg_r.string() + " --resume " + (base / "h/step_000057").string());
  if (resumed.exit_code != 0) {
    detail = "resume failed: " + resumed.output;
    return false;
  }
  if (file_bytes(base / "a/step_000100/model.bin") !=
      file_bytes(base / "h/step_000100/model.bin")) {
    detail = "resumed run diverged from the uninterrupted run";
    return false;
  }
  detail = "shards and checkpoints byte-identical; resume at 57 matches step 100 bit-exactly";
  return true;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<bool(std::string&)> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient exactness (tiny config, central differences, rel err < 1e-4)",
       criterion_gradients},
      {2, "objective-mixture fidelity (clm share in [0.19, 0.21], exact drop counts)",
       criterion_mixture},
      {3, "Eq.1 sampling (chi-square vs q=(10/11, 1/11) at p > 0.01)", criterion_sampling},
      {4, "overfit integration (loss < 0.1x initial, 100% greedy exact match)",
       criterion_overfit},
      {5, "scoring correctness (gold ranked first on 16-option sets, both modes)",
       criterion_scoring},
      {6, "FiD degeneration (k=1 bit-identical to standard generation, 100 prompts)",
       criterion_fid},
      {7, "memorization trend (extraction non-decreasing in duplication {1,4,16,64})",
       criterion_memorization_trend},
      {8, "suffix-array oracle (1000 exact counts; frequency and length bin edges)",
       criterion_suffix_oracle},
      {9, "decontamination (10/100 planted docs dropped, survivors clean)",
       criterion_decontamination},
      {10, "end-to-end determinism (byte-identical runs, bit-exact resume at 57)",
       criterion_determinism},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = false;
    try {
      ok = c.run(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %2d. %s (%.1fs) %s\n", ok ? "PASS" : "FAIL", c.id, c.name, secs,
                detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
  }
  if (failures) std::printf("%d criterion(s) failed\n", failures);
  return failures;
}
