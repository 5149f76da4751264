#include <doctest.h>

#include "medalign/corpus.hpp"

#include <filesystem>
#include <fstream>
#include <set>

using namespace medalign;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("medalign_test_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

SyntheticSpec reference_spec(int n, uint64_t seed) {
    SyntheticSpec spec;
    spec.diseases = {"pneumonia", "edema", "cardiomegaly"};
    spec.glyph_map = {{"pneumonia", "disc"}, {"edema", "square"}, {"cardiomegaly", "cross"}};
    spec.n_samples = n;
    spec.distractor_rate = 0.5;
    spec.negative_rate = 0.5;
    spec.prevalence = {{"pneumonia", 0.5}, {"edema", 0.5}, {"cardiomegaly", 0.5}};
    spec.seed = seed;
    return spec;
}

}  // namespace

TEST_CASE("split_sentences handles the pinned examples") {
    CHECK(split_sentences("No pneumothorax. Heart size normal.") ==
          std::vector<std::string>{"No pneumothorax.", "Heart size normal."});
    CHECK(split_sentences("There is pneumonia") == std::vector<std::string>{"There is pneumonia"});
    // terminator runs stay inside the sentence; the letterless tail is dropped
    CHECK(split_sentences("a... b. 123.") == std::vector<std::string>{"a... b."});
}

TEST_CASE("split_sentences error paths") {
    CHECK_THROWS(split_sentences(""));
    CHECK_THROWS(split_sentences("   \t  "));
    CHECK_THROWS(split_sentences("123. 456."));
}

TEST_CASE("split then join is idempotent") {
    const std::vector<std::string> reports = {
        "One sentence only",
        "First. Second! Third?",
        "Ellipsis... then more. 42. Trailing words",
        "Heart size is stable. No acute process.",
    };
    for (const auto& r : reports) {
        const auto once = split_sentences(r);
        std::string joined;
        for (size_t i = 0; i < once.size(); ++i) {
            if (i) joined += " ";
            joined += once[i];
        }
        CHECK(split_sentences(joined) == once);
    }
}

TEST_CASE("build_vocab assigns lexicographic ids after the reserved block") {
    auto v1 = Vocabulary::build_from_reports({"b a", "a"}, 1);
    CHECK(v1.id("a") == 4);
    CHECK(v1.id("b") == 5);
    CHECK(v1.size() == 6);

    auto v2 = Vocabulary::build_from_reports({"b a", "a"}, 2);
    CHECK(v2.id("a") == 4);
    CHECK(v2.id("b") == Vocabulary::kUnk);
    CHECK_THROWS(Vocabulary::build({}, 1));
}

TEST_CASE("vocabulary round trips bit-identically") {
    auto dir = temp_dir("vocab");
    auto v = Vocabulary::build_from_reports({"the heart is large", "the lungs are clear"}, 1);
    v.save(dir / "vocab.tsv");
    auto reloaded = Vocabulary::load(dir / "vocab.tsv");
    CHECK(v == reloaded);
    CHECK(v.hash() == reloaded.hash());
    reloaded.save(dir / "vocab2.tsv");
    std::ifstream a(dir / "vocab.tsv", std::ios::binary), b(dir / "vocab2.tsv", std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
}

TEST_CASE("tokenize produces boundaries that partition the token span") {
    auto v = Vocabulary::build_from_reports({"no pneumothorax seen today"}, 1);
    SUBCASE("direct lookup") {
        auto s = tokenize({"no pneumothorax"}, v);
        CHECK(s.token_ids == std::vector<int>{v.id("no"), v.id("pneumothorax")});
        CHECK(s.sentence_boundaries == std::vector<std::pair<int, int>>{{0, 2}});
    }
    SUBCASE("unknown words map to unk") {
        auto s = tokenize({"xyzzy"}, v);
        CHECK(s.token_ids == std::vector<int>{Vocabulary::kUnk});
        CHECK(s.sentence_boundaries == std::vector<std::pair<int, int>>{{0, 1}});
    }
    SUBCASE("boundary arithmetic over two sentences") {
        auto s = tokenize({"no pneumothorax seen", "seen today"}, v);
        CHECK(s.sentence_boundaries == std::vector<std::pair<int, int>>{{0, 3}, {3, 5}});
    }
    SUBCASE("boundaries cover every token exactly once") {
        auto s = tokenize({"no pneumothorax, seen!", "today... no"}, v);
        int covered = 0;
        int prev_end = 0;
        for (auto [b, e] : s.sentence_boundaries) {
            CHECK(b == prev_end);
            covered += e - b;
            prev_end = e;
        }
        CHECK(covered == static_cast<int>(s.token_ids.size()));
    }
    CHECK_THROWS(tokenize({}, v));
    CHECK_THROWS(tokenize({"..."}, v));
}

TEST_CASE("tokenizer strips edge punctuation and lowercases") {
    auto words = tokenize_words("  The heart, (size) is NORMAL. ");
    CHECK(words == std::vector<std::string>{"the", "heart", "size", "is", "normal"});
}

TEST_CASE("gen_synthetic obeys the label-report consistency invariant") {
    auto spec = reference_spec(40, 11);
    auto samples = gen_synthetic(spec);
    REQUIRE(samples.size() == 40);
    for (const auto& s : samples) {
        for (const auto& d : spec.diseases) {
            const bool labeled = s.sample.labels.at(d);
            const bool mentioned =
                s.sample.report.find(positive_template(d)) != std::string::npos;
            CHECK(labeled == mentioned);
        }
        CHECK(s.sample.image.minCoeff() >= 0.0);
        CHECK(s.sample.image.maxCoeff() <= 1.0);
        // one glyph per present disease, inside the frame
        std::set<std::string> rendered;
        for (const auto& g : s.glyphs) {
            rendered.insert(g.disease);
            CHECK(g.x0 >= 0);
            CHECK(g.y1 <= spec.image_size);
        }
        for (const auto& [d, present] : s.sample.labels) CHECK(rendered.count(d) == (present ? 1u : 0u));
    }
}

TEST_CASE("gen_synthetic with zero prevalence yields all-negative corpora") {
    auto spec = reference_spec(15, 3);
    spec.prevalence = {{"pneumonia", 0.0}, {"edema", 0.0}, {"cardiomegaly", 0.0}};
    for (const auto& s : gen_synthetic(spec)) {
        CHECK(s.glyphs.empty());
        for (const auto& [d, present] : s.sample.labels) CHECK(!present);
        CHECK(s.sample.report.find("There is") == std::string::npos);
    }
}

TEST_CASE("gen_synthetic is deterministic and prevalence is respected") {
    auto spec = reference_spec(1000, 7);
    auto a = gen_synthetic(spec);
    auto b = gen_synthetic(spec);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].sample.report == b[i].sample.report);
        CHECK(a[i].sample.image == b[i].sample.image);
    }
    for (const auto& d : spec.diseases) {
        int positives = 0;
        for (const auto& s : a) positives += s.sample.labels.at(d) ? 1 : 0;
        const double rate = positives / 1000.0;
        CHECK(rate > 0.45);
        CHECK(rate < 0.55);
    }
}

TEST_CASE("gen_synthetic validates its spec") {
    auto spec = reference_spec(5, 1);
    spec.glyph_map.erase("edema");
    CHECK_THROWS(gen_synthetic(spec));
    spec = reference_spec(0, 1);
    CHECK_THROWS(gen_synthetic(spec));
    spec = reference_spec(5, 1);
    spec.prevalence["edema"] = 1.5;
    CHECK_THROWS(gen_synthetic(spec));
    // an image too crowded for non-overlapping placement
    spec = reference_spec(5, 1);
    spec.image_size = 24;
    spec.glyph_size = 16;
    spec.prevalence = {{"pneumonia", 1.0}, {"edema", 1.0}, {"cardiomegaly", 1.0}};
    CHECK_THROWS(gen_synthetic(spec));
}

TEST_CASE("image files round trip bit-exactly") {
    auto dir = temp_dir("img");
    nn::Matrix img(4, 6);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 6; ++x) img(y, x) = static_cast<float>(0.1 * y + 0.01 * x);
    save_image_f32(img, dir / "a.f32");
    auto back = load_image_f32(dir / "a.f32");
    CHECK(back == img);

    // header is two little-endian u32s
    std::ifstream in(dir / "a.f32", std::ios::binary);
    unsigned char hdr[8];
    in.read(reinterpret_cast<char*>(hdr), 8);
    CHECK(hdr[0] == 4);
    CHECK(hdr[4] == 6);
}

TEST_CASE("corpus directory round trips") {
    auto dir = temp_dir("corpus");
    auto samples = gen_synthetic(reference_spec(6, 9));
    save_corpus_dir(samples, dir);
    auto loaded = load_corpus_dir(dir);
    REQUIRE(loaded.size() == samples.size());
    for (size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].sample_id == samples[i].sample.sample_id);
        CHECK(loaded[i].report == samples[i].sample.report);
        CHECK(loaded[i].labels == samples[i].sample.labels);
        // float32 on disk: compare after the same rounding
        CHECK((loaded[i].image.cast<float>() == samples[i].sample.image.cast<float>()));
    }
    CHECK(fs::exists(dir / "grounding.jsonl"));
}
