#include <doctest.h>

#include "medalign/dictionary.hpp"

#include <filesystem>
#include <fstream>

using namespace medalign;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("medalign_dict_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

const char* kFixturesDir = MEDALIGN_FIXTURES_DIR;

}  // namespace

TEST_CASE("manual dictionary ships 17 entries with the pinned keyword lists") {
    const auto dict = build_manual_dictionary();
    CHECK(dict.entries.size() == 17);
    CHECK(dict.source == DictionarySource::manual);
    CHECK(dict.entry("atelectasis").keywords == std::vector<std::string>{"atelectasis"});
    CHECK(dict.entry("pneumothorax").keywords ==
          std::vector<std::string>{"pneumothor", "air", "chest wall", "acute cardiopulmonary"});
    for (const auto& e : dict.entries) {
        CHECK(e.positives.size() == 1);
        CHECK(e.negatives.size() == 1);
        CHECK(e.positives[0] == "There is " + e.name + ".");
        CHECK(e.negatives[0] == "No " + e.name + ".");
    }
    // "infection" keys pneumonia
    const auto& pneumonia = dict.entry("pneumonia").keywords;
    CHECK(std::find(pneumonia.begin(), pneumonia.end(), "infection") != pneumonia.end());
}

TEST_CASE("dictionary save/load round trips and validates") {
    auto dir = temp_dir("roundtrip");
    const auto dict = build_manual_dictionary();
    save_dictionary(dict, dir / "dict.json");
    const auto back = load_dictionary(dir / "dict.json");
    REQUIRE(back.entries.size() == dict.entries.size());
    for (size_t i = 0; i < dict.entries.size(); ++i) {
        CHECK(back.entries[i].name == dict.entries[i].name);
        CHECK(back.entries[i].keywords == dict.entries[i].keywords);
        CHECK(back.entries[i].positives == dict.entries[i].positives);
        CHECK(back.entries[i].negatives == dict.entries[i].negatives);
    }
    CHECK(back.source == dict.source);
}

TEST_CASE("load rejects duplicates and template violations, naming the entry") {
    auto dir = temp_dir("invalid");
    auto write = [&](const std::string& name, const std::string& body) {
        std::ofstream out(dir / name);
        out << body;
    };
    write("dup.json", R"({"version":"1","source":"custom","entries":[
      {"name":"edema","keywords":["edema"],"positives":["There is edema."],"negatives":["No edema."]},
      {"name":"edema","keywords":["edema"],"positives":["There is edema."],"negatives":["No edema."]}]})");
    CHECK_THROWS_WITH_AS(load_dictionary(dir / "dup.json"),
                         doctest::Contains("duplicate disease 'edema'"), std::invalid_argument);

    write("template.json", R"({"version":"1","source":"custom","entries":[
      {"name":"edema","keywords":["edema"],"positives":["Edema is present."],"negatives":["No edema."]}]})");
    CHECK_THROWS_WITH_AS(load_dictionary(dir / "template.json"),
                         doctest::Contains("template contract"), std::invalid_argument);

    write("upper.json", R"({"version":"1","source":"custom","entries":[
      {"name":"edema","keywords":["Edema"],"positives":["There is edema."],"negatives":["No edema."]}]})");
    CHECK_THROWS(load_dictionary(dir / "upper.json"));
}

TEST_CASE("keyword_index inverts the keyword lists") {
    const auto dict = build_manual_dictionary();
    const auto index = keyword_index(dict);
    CHECK(index.at("pleural") ==
          std::vector<std::string>{"pleural thickening", "pleural effusion"});
    CHECK(index.at("atelectasis") == std::vector<std::string>{"atelectasis"});

    // true inverse: d in index[k] <=> k in entry(d).keywords
    size_t distinct = 0;
    for (const auto& [k, diseases] : index) {
        ++distinct;
        for (const auto& d : diseases) {
            const auto& kw = dict.entry(d).keywords;
            CHECK(std::find(kw.begin(), kw.end(), k) != kw.end());
        }
    }
    for (const auto& e : dict.entries) {
        for (const auto& k : e.keywords) {
            const auto& ds = index.at(k);
            CHECK(std::find(ds.begin(), ds.end(), e.name) != ds.end());
        }
    }
    CHECK(distinct == index.size());
}

TEST_CASE("fixture augmentation yields 6 sentences per set, manual first") {
    const auto dict = build_manual_dictionary();
    FixtureLlmClient client(kFixturesDir);
    const auto augmented = augment_with_llm(dict, client, 5);
    CHECK(augmented.entries.size() == 17);
    for (size_t i = 0; i < augmented.entries.size(); ++i) {
        const auto& e = augmented.entries[i];
        CHECK(e.positives.size() == 6);
        CHECK(e.negatives.size() == 6);
        CHECK(e.positives[0] == "There is " + e.name + ".");
        CHECK(e.negatives[0] == "No " + e.name + ".");
        // keywords and templates untouched
        CHECK(e.keywords == dict.entries[i].keywords);
    }

    // replay is deterministic
    const auto again = augment_with_llm(dict, client, 5);
    for (size_t i = 0; i < augmented.entries.size(); ++i) {
        CHECK(again.entries[i].positives == augmented.entries[i].positives);
        CHECK(again.entries[i].negatives == augmented.entries[i].negatives);
    }
}

TEST_CASE("augmentation with n=0 is a no-op") {
    const auto dict = build_manual_dictionary();
    FixtureLlmClient client(kFixturesDir);
    const auto out = augment_with_llm(dict, client, 0);
    for (size_t i = 0; i < dict.entries.size(); ++i) {
        CHECK(out.entries[i].positives == dict.entries[i].positives);
        CHECK(out.entries[i].negatives == dict.entries[i].negatives);
    }
}

TEST_CASE("augmentation rejects malformed fixture responses") {
    auto dir = temp_dir("badfix");
    {
        std::ofstream pos(dir / "positive.txt");
        pos << "Only one block here.\n";
        std::ofstream neg(dir / "negative.txt");
        neg << "Only one block here.\n";
    }
    const auto dict = build_manual_dictionary();
    FixtureLlmClient client(dir);
    CHECK_THROWS(augment_with_llm(dict, client, 5));
}

TEST_CASE("prompt carries the disease list and the sentence count") {
    const auto dict = build_manual_dictionary();
    std::vector<std::string> names;
    for (const auto& e : dict.entries) names.push_back(e.name);
    const std::string pos = positive_sentence_prompt(names, 5);
    CHECK(pos.find("five possible imaging diagnosis reports") != std::string::npos);
    CHECK(pos.find("lung opacity, atelectasis, cardiomegaly") != std::string::npos);
    CHECK(pos.find("no numbers") != std::string::npos);
    const std::string neg = negative_sentence_prompt(names, 5);
    CHECK(neg.find("five possible negative imaging diagnosis reports") != std::string::npos);
}
