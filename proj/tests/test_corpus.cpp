#include <catch2/catch_amalgamated.hpp>
#include <map>
#include <set>

#include "seq2seq/corpus.hpp"
#include "seq2seq/rng.hpp"

using namespace seq2seq;

TEST_CASE("language weights follow the alpha-scaled multinomial") {
  SECTION("alpha 0.5 on a 100:1 split gives 10/11 and 1/11") {
    const auto w = language_weights({{"A", 100}, {"B", 1}}, 0.5);
    REQUIRE(w.q.at("A") == Catch::Approx(10.0 / 11.0).epsilon(1e-12));
    REQUIRE(w.q.at("B") == Catch::Approx(1.0 / 11.0).epsilon(1e-12));
  }
  SECTION("alpha 1 is the identity") {
    const auto w = language_weights({{"A", 3}, {"B", 1}}, 1.0);
    REQUIRE(w.q.at("A") == Catch::Approx(0.75).epsilon(1e-12));
    REQUIRE(w.q.at("B") == Catch::Approx(0.25).epsilon(1e-12));
  }
  SECTION("alpha 0 is uniform") {
    const auto w = language_weights({{"A", 1000}, {"B", 2}, {"C", 5}}, 0.0);
    for (const auto& [lang, q] : w.q) REQUIRE(q == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SECTION("weights sum to one") {
    const auto w = language_weights({{"A", 17}, {"B", 5}, {"C", 211}, {"D", 3}}, 0.3);
    double sum = 0;
    for (const auto& [lang, q] : w.q) sum += q;
    REQUIRE(std::abs(sum - 1.0) < 1e-12);
  }
  SECTION("bad inputs are configuration errors") {
    REQUIRE_THROWS_AS(language_weights({}, 0.5), ConfigError);
    REQUIRE_THROWS_AS(language_weights({{"A", 0}}, 0.5), ConfigError);
  }
}

TEST_CASE("alpha in (0,1) boosts under-represented languages") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::map<std::string, std::uint64_t> counts;
    std::set<std::uint64_t> used;
    for (int i = 0; i < 5; ++i) {
      std::uint64_t n;
      do {
        n = 1 + rng.next_index(10000);
      } while (!used.insert(n).second);
      counts["lang" + std::to_string(i)] = n;
    }
    const double alpha = 0.1 + 0.8 * rng.next_double();
    const auto w = language_weights(counts, alpha);
    double total = 0;
    for (const auto& [lang, n] : counts) total += static_cast<double>(n);
    std::string min_lang, max_lang;
    std::uint64_t min_n = UINT64_MAX, max_n = 0;
    for (const auto& [lang, n] : counts) {
      if (n < min_n) { min_n = n; min_lang = lang; }
      if (n > max_n) { max_n = n; max_lang = lang; }
    }
    REQUIRE(w.q.at(min_lang) > static_cast<double>(min_n) / total);
    REQUIRE(w.q.at(max_lang) < static_cast<double>(max_n) / total);
  }
}

TEST_CASE("spoken-form formatter") {
  REQUIRE(to_spoken("Hello, World!") == "hello world");
  REQUIRE(to_spoken("").empty());
  REQUIRE(to_spoken("\xc2\xabQuote\xc2\xbb die Katze.") == "quote die katze");

  SECTION("idempotence on random strings") {
    Rng rng(5);
    const std::vector<std::string> pool = {
        "a", "b", "c", "X", "Y", "Z", " ", "0", "1", "2",  "3",  "!",      "?",
        ".", ",", ";", ":", "'", "\"", "(", ")", "\xc3\xa9", "\xc3\x9f",
        "\xe2\x80\x9c", "\xe2\x80\x9d", "\xe3\x80\x82", "\xe2\x80\x94"};
    for (int t = 0; t < 1000; ++t) {
      std::string s;
      const std::size_t len = rng.next_index(40);
      for (std::size_t i = 0; i < len; ++i) s += pool[rng.next_index(pool.size())];
      const std::string once = to_spoken(s);
      REQUIRE(to_spoken(once) == once);
    }
  }
}

TEST_CASE("sample stream honors form choice and is reproducible") {
  SourceSpec src;
  src.name = "only";
  src.language = "en";
  src.documents = {"The Dog.", "A Cat!", "Some Bird,"};
  src.base_weight = 1.0;
  src.spoken_fraction = 1.0;
  const auto w = language_weights({{"en", 3}}, 0.5);

  SampleStream s1({src}, w, 42);
  SampleStream s2({src}, w, 42);
  for (int i = 0; i < 200; ++i) {
    const SampledDoc a = s1.next();
    const SampledDoc b = s2.next();
    REQUIRE(a.text == b.text);
    REQUIRE(a.spoken);
    REQUIRE(a.text == to_spoken(a.text));  // already formatted
  }
}

TEST_CASE("sampled language frequencies pass a chi-square test against q") {
  SourceSpec a, b;
  a.name = "A"; a.language = "A"; a.base_weight = 1.0;
  b.name = "B"; b.language = "B"; b.base_weight = 1.0;
  for (int i = 0; i < 100; ++i) a.documents.push_back("doc a " + std::to_string(i));
  b.documents.push_back("doc b");
  const auto w = language_weights({{"A", 100}, {"B", 1}}, 0.5);

  SampleStream stream({a, b}, w, 1234);
  const int draws = 100000;
  std::map<std::string, int> hist;
  for (int i = 0; i < draws; ++i) ++hist[stream.next().language];

  double chi2 = 0;
  for (const auto& [lang, q] : w.q) {
    const double expected = q * draws;
    const double diff = hist[lang] - expected;
    chi2 += diff * diff / expected;
  }
  REQUIRE(chi2 < 6.635);  // chi-square(1 dof) critical value at p = 0.01
}

TEST_CASE("missing language weight is a configuration error") {
  SourceSpec src;
  src.name = "x"; src.language = "xx"; src.documents = {"d"};
  const auto w = language_weights({{"en", 1}}, 0.5);
  REQUIRE_THROWS_AS(SampleStream({src}, w, 0), ConfigError);
}

TEST_CASE("greedy packing of [5,5,5] at target 12") {
  std::vector<TokenSequence> docs;
  std::uint32_t next = 100;
  for (int d = 0; d < 3; ++d) {
    TokenSequence ts;
    for (int i = 0; i < 5; ++i) ts.ids.push_back(next++);
    ts.language = "en";
    docs.push_back(ts);
  }
  const std::uint32_t doc_id = 4;
  const auto packs = pack(docs, 12, doc_id);
  REQUIRE(packs.size() == 2);
  REQUIRE(packs[0].ids.size() == 11);  // 5 + separator + 5
  REQUIRE(packs[0].ids[5] == doc_id);
  REQUIRE(packs[0].doc_boundaries == std::vector<std::size_t>{5});
  REQUIRE(packs[0].languages.size() == 2);
  REQUIRE(packs[1].ids.size() == 5);
  REQUIRE(packs[1].doc_boundaries.empty());
}

TEST_CASE("single short document packs alone without separator") {
  std::vector<TokenSequence> docs(1);
  docs[0].ids = {1, 2, 3};
  const auto packs = pack(docs, 16, 4);
  REQUIRE(packs.size() == 1);
  REQUIRE(packs[0].ids == TokenIds{1, 2, 3});
}

TEST_CASE("oversized documents split into exact chunks") {
  std::vector<TokenSequence> docs(1);
  for (std::uint32_t i = 0; i < 25; ++i) docs[0].ids.push_back(100 + i);
  const auto packs = pack(docs, 10, 4);
  REQUIRE(packs.size() == 3);
  REQUIRE(packs[0].ids.size() == 10);
  REQUIRE(packs[1].ids.size() == 10);
  REQUIRE(packs[2].ids.size() == 5);
}

TEST_CASE("packing conserves the token multiset on random streams") {
  Rng rng(9);
  const std::uint32_t doc_id = 4;
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<TokenSequence> docs;
    std::multiset<std::uint32_t> input_tokens;
    const std::size_t ndocs = 1 + rng.next_index(8);
    for (std::size_t d = 0; d < ndocs; ++d) {
      TokenSequence ts;
      const std::size_t len = 1 + rng.next_index(40);
      for (std::size_t i = 0; i < len; ++i) {
        const auto tok = static_cast<std::uint32_t>(10 + rng.next_index(90));
        ts.ids.push_back(tok);
        input_tokens.insert(tok);
      }
      docs.push_back(std::move(ts));
    }
    const std::size_t target = 3 + rng.next_index(20);
    const auto packs = pack(docs, target, doc_id);
    std::multiset<std::uint32_t> output_tokens;
    for (const auto& p : packs) {
      REQUIRE(p.ids.size() <= target);
      for (std::uint32_t tok : p.ids)
        if (tok != doc_id) output_tokens.insert(tok);
    }
    REQUIRE(output_tokens == input_tokens);
  }
}

TEST_CASE("planted 13-gram contamination is dropped exactly") {
  const std::string benchmark_sentence =
      "one two three four five six seven eight nine ten eleven twelve thirteen";
  const std::vector<std::string> benchmarks = {"Header line.\n" + benchmark_sentence,
                                               "another benchmark document entirely"};
  std::vector<std::string> docs;
  Rng rng(21);
  for (int i = 0; i < 100; ++i) {
    std::string doc = "clean document number " + std::to_string(i) + " with few words.";
    if (i % 10 == 3) doc += "\nAlso: " + benchmark_sentence + " embedded here.";
    docs.push_back(doc);
  }
  const auto result = decontaminate(docs, benchmarks, 13);
  REQUIRE(result.dropped_count == 10);
  REQUIRE(result.kept.size() == 90);

  // soundness: survivors share no 13-gram with the benchmark set
  BenchmarkNgrams set(benchmarks, 13);
  for (const std::string& doc : result.kept) REQUIRE_FALSE(set.contaminated(doc));
}

TEST_CASE("documents with short sentences cannot be contaminated") {
  const std::vector<std::string> benchmarks = {
      "a b c d e f g h i j k l m n o p q r s t"};
  // every sentence has fewer than 13 whitespace tokens
  const std::vector<std::string> docs = {"a b c d e f. g h i j k l. m n o p q r s t"};
  const auto result = decontaminate(docs, benchmarks, 13);
  REQUIRE(result.dropped_count == 0);
}

TEST_CASE("decontamination requires a nonempty benchmark set") {
  REQUIRE_THROWS_AS(decontaminate({"doc"}, {}, 13), ConfigError);
}

TEST_CASE("shard files round-trip") {
  Rng rng(17);
  std::vector<TokenIds> records;
  for (int r = 0; r < 20; ++r) {
    TokenIds rec;
    const std::size_t len = rng.next_index(50);
    for (std::size_t i = 0; i < len; ++i)
      rec.push_back(static_cast<std::uint32_t>(rng.next_u64() & 0xffffff));
    records.push_back(std::move(rec));
  }
  const auto dir = std::filesystem::temp_directory_path() / "seq2seq_shard_test";
  std::filesystem::create_directories(dir);
  write_shard(dir / "x.bin", records);
  REQUIRE(read_shard(dir / "x.bin") == records);
  std::filesystem::remove_all(dir);
}
