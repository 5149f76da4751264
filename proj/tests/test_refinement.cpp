#include <doctest.h>

#include "medalign/refinement.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

using namespace medalign;
namespace fs = std::filesystem;

namespace {

// a 6-sentence augmented dictionary restricted to the two pleural diseases
ClinicalDictionary pleural_dict() {
    ClinicalDictionary d;
    d.source = DictionarySource::custom;
    for (const std::string name : {"pleural thickening", "pleural effusion"}) {
        DiseaseEntry e;
        e.name = name;
        e.keywords = {"pleural"};
        e.positives = {"There is " + name + "."};
        e.negatives = {"No " + name + "."};
        for (int i = 1; i <= 5; ++i) {
            e.positives.push_back("Generated positive " + std::to_string(i) + " for " + name + ".");
            e.negatives.push_back("Generated negative " + std::to_string(i) + " for " + name + ".");
        }
        d.entries.push_back(std::move(e));
    }
    return d;
}

// scorer assigning one similarity per group so ss values are exact
class GroupTableScorer : public RefinementScorer {
public:
    GroupTableScorer(std::map<std::string, double> by_group_member, std::map<std::string, double> itm)
        : sim_(std::move(by_group_member)), itm_(std::move(itm)) {}
    double similarity(const std::string& s) override {
        for (const auto& [needle, score] : sim_) {
            if (s.find(needle) != std::string::npos) return score;
        }
        return 0.0;
    }
    double itm_match_probability(const std::string& s) override {
        for (const auto& [needle, p] : itm_) {
            if (s.find(needle) != std::string::npos) return p;
        }
        return 0.0;
    }

private:
    std::map<std::string, double> sim_, itm_;
};

std::vector<SentenceGroup> worked_example_groups(double ss1, double ss2, double ss3, double ss4,
                                                 double ss5) {
    const std::string sentence = "The pleural surfaces are smooth.";
    const auto dict = pleural_dict();
    auto groups = assemble_groups(sentence, detect_keywords(sentence, keyword_index(dict)), dict);
    REQUIRE(groups.size() == 5);
    const double ss[5] = {ss1, ss2, ss3, ss4, ss5};
    for (size_t g = 0; g < 5; ++g) {
        for (auto& s : groups[g].sentences) s.score = ss[g];
        groups[g].avg_score = ss[g];
    }
    return groups;
}

}  // namespace

TEST_CASE("detect_keywords matches the paper's examples") {
    const auto dict = build_manual_dictionary();
    const auto index = keyword_index(dict);
    CHECK(detect_keywords("It appears more amorphous and a small focus of infection is not excluded.",
                          index) == std::set<std::string>{"pneumonia"});
    CHECK(detect_keywords("pleural surfaces are smooth", index) ==
          std::set<std::string>{"pleural thickening", "pleural effusion"});
    CHECK(detect_keywords("Heart size is normal.", index).empty());
    // matching is case-insensitive substring
    CHECK(detect_keywords("PLEURAL EFFUSION SUSPECTED", index).count("pleural effusion") == 1);
}

TEST_CASE("assemble_groups produces original + 2 per detected disease") {
    const auto dict = pleural_dict();
    const std::string sentence = "pleural surfaces are smooth";
    const auto detected = detect_keywords(sentence, keyword_index(dict));
    const auto groups = assemble_groups(sentence, detected, dict);
    REQUIRE(groups.size() == 5);  // original, pos(thick), neg(thick), pos(eff), neg(eff)
    CHECK(groups[0].kind == GroupKind::original);
    CHECK(groups[0].sentences.size() == 1);
    CHECK(groups[1].kind == GroupKind::positive);
    CHECK(groups[1].disease == "pleural thickening");
    CHECK(groups[1].sentences.size() == 6);
    CHECK(groups[2].kind == GroupKind::negative);
    CHECK(groups[2].disease == "pleural thickening");
    CHECK(groups[3].disease == "pleural effusion");
    CHECK(groups[4].disease == "pleural effusion");
    // representative is the manual template
    CHECK(groups[1].representative == "There is pleural thickening.");
    CHECK(groups[4].representative == "No pleural effusion.");

    // one detected disease: 3 groups; manual-only dictionary: singleton sets
    const auto manual = build_manual_dictionary();
    const auto g3 = assemble_groups("there is edema", {"edema"}, manual);
    REQUIRE(g3.size() == 3);
    CHECK(g3[1].sentences.size() == 1);
    CHECK(g3[2].sentences.size() == 1);

    CHECK_THROWS(assemble_groups("plain sentence", {}, manual));
}

TEST_CASE("order_groups reproduces the worked ordering G2,G1,G4,G3,G5") {
    // ss = (30, 32, 15, 25, 10)% for (G1..G5)
    auto groups = worked_example_groups(0.30, 0.32, 0.15, 0.25, 0.10);
    const auto ordered = order_groups(groups);
    REQUIRE(ordered.size() == 5);
    CHECK(ordered[0].kind == GroupKind::positive);
    CHECK(ordered[0].disease == "pleural thickening");  // G2
    CHECK(ordered[1].kind == GroupKind::original);      // G1
    CHECK(ordered[2].kind == GroupKind::positive);
    CHECK(ordered[2].disease == "pleural effusion");    // G4
    CHECK(ordered[3].kind == GroupKind::negative);
    CHECK(ordered[3].disease == "pleural thickening");  // G3
    CHECK(ordered[4].kind == GroupKind::negative);
    CHECK(ordered[4].disease == "pleural effusion");    // G5
}

TEST_CASE("order_groups is stable on ties and sorts members by score") {
    auto groups = worked_example_groups(0.2, 0.2, 0.2, 0.2, 0.2);
    const auto ordered = order_groups(groups);
    for (size_t i = 0; i < ordered.size(); ++i)
        CHECK(ordered[i].original_position == static_cast<int>(i));

    auto two = worked_example_groups(0.1, 0.9, 0.0, 0.0, 0.0);
    CHECK(order_groups(two)[0].avg_score == doctest::Approx(0.9));

    // member ordering: descending score, ties lexicographic
    SentenceGroup g;
    g.kind = GroupKind::positive;
    g.sentences = {{"bbb", 0.5}, {"aaa", 0.9}, {"ccc", 0.5}};
    g.avg_score = 0.6;
    SentenceGroup orig;
    orig.kind = GroupKind::original;
    orig.sentences = {{"x", 0.0}};
    orig.avg_score = 0.0;
    const auto sorted_groups = order_groups({orig, g});
    const auto& members = sorted_groups[0].sentences;
    CHECK(members[0].text == "aaa");
    CHECK(members[1].text == "bbb");
    CHECK(members[2].text == "ccc");
}

TEST_CASE("order_groups agrees with a brute-force sort oracle") {
    Rng rng(31);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n_groups = 2 + static_cast<int>(rng.below(6));
        std::vector<SentenceGroup> groups;
        for (int g = 0; g < n_groups; ++g) {
            SentenceGroup sg;
            sg.kind = g == 0 ? GroupKind::original : GroupKind::positive;
            sg.original_position = g;
            const int members = 1 + static_cast<int>(rng.below(4));
            double sum = 0.0;
            for (int m = 0; m < members; ++m) {
                // quantized scores to force ties
                const double score = static_cast<double>(rng.below(5)) / 4.0;
                sg.sentences.push_back({"s" + std::to_string(g) + "_" + std::to_string(m), score});
                sum += score;
            }
            sg.avg_score = sum / members;
            groups.push_back(std::move(sg));
        }
        const auto ordered = order_groups(groups);

        // oracle: selection sort by (ss desc, position asc)
        std::vector<int> expect;
        std::vector<bool> used(static_cast<size_t>(n_groups), false);
        for (int k = 0; k < n_groups; ++k) {
            int best = -1;
            for (int g = 0; g < n_groups; ++g) {
                if (used[static_cast<size_t>(g)]) continue;
                if (best == -1 || groups[static_cast<size_t>(g)].avg_score >
                                      groups[static_cast<size_t>(best)].avg_score)
                    best = g;
            }
            used[static_cast<size_t>(best)] = true;
            expect.push_back(best);
        }
        for (int k = 0; k < n_groups; ++k)
            CHECK(ordered[static_cast<size_t>(k)].original_position == expect[static_cast<size_t>(k)]);
    }
}

TEST_CASE("select_supplement follows the ITM gate rules") {
    RefineConfig cfg;
    cfg.itm_threshold = 0.5;
    cfg.policy = SupplementPolicy::manual_template;

    SUBCASE("G2 first and matching: supplement from G2's manual template") {
        auto ordered = order_groups(worked_example_groups(0.30, 0.32, 0.15, 0.25, 0.10));
        GroupTableScorer scorer({}, {{"There is pleural thickening.", 0.9}});
        auto chosen = select_supplement(ordered, scorer, cfg);
        REQUIRE(chosen.has_value());
        CHECK(chosen->first == "There is pleural thickening.");
        CHECK(chosen->second.disease == "pleural thickening");
        CHECK(chosen->second.kind == GroupKind::positive);
        CHECK(chosen->second.group_rank == 0);
        CHECK(chosen->second.itm_probability == doctest::Approx(0.9));
    }

    SUBCASE("original first: only the second group is assessed") {
        auto ordered = order_groups(worked_example_groups(0.50, 0.32, 0.15, 0.25, 0.10));
        CHECK(ordered[0].kind == GroupKind::original);
        GroupTableScorer no_match({}, {{"There is pleural thickening.", 0.2},
                                       {"There is pleural effusion.", 0.9}});
        // G4 would match, but only group 2 (G2) is assessed
        CHECK(!select_supplement(ordered, no_match, cfg).has_value());

        GroupTableScorer match({}, {{"There is pleural thickening.", 0.8}});
        auto chosen = select_supplement(ordered, match, cfg);
        REQUIRE(chosen.has_value());
        CHECK(chosen->second.group_rank == 1);
    }

    SUBCASE("no group before the original matches: original retained") {
        auto ordered = order_groups(worked_example_groups(0.30, 0.32, 0.15, 0.25, 0.10));
        GroupTableScorer scorer({}, {{"There is pleural thickening.", 0.2}});
        CHECK(!select_supplement(ordered, scorer, cfg).has_value());
    }

    SUBCASE("walk continues past failing groups ranked before the original") {
        auto ordered = order_groups(worked_example_groups(0.20, 0.32, 0.15, 0.25, 0.10));
        // order: G2, G4, G1, ... both G2 and G4 precede the original
        CHECK(ordered[0].disease == "pleural thickening");
        CHECK(ordered[1].disease == "pleural effusion");
        CHECK(ordered[2].kind == GroupKind::original);
        GroupTableScorer scorer({}, {{"There is pleural thickening.", 0.2},
                                     {"There is pleural effusion.", 0.7}});
        auto chosen = select_supplement(ordered, scorer, cfg);
        REQUIRE(chosen.has_value());
        CHECK(chosen->first == "There is pleural effusion.");
        CHECK(chosen->second.group_rank == 1);
    }

    SUBCASE("top_similarity policy returns the best-scoring member") {
        auto groups = worked_example_groups(0.30, 0.32, 0.15, 0.25, 0.10);
        // bump one generated sentence above the manual template in G2
        for (auto& g : groups) {
            if (g.kind == GroupKind::positive && g.disease == "pleural thickening") {
                for (auto& s : g.sentences) {
                    if (s.text == "Generated positive 3 for pleural thickening.") s.score = 0.95;
                }
            }
        }
        auto ordered = order_groups(groups);
        GroupTableScorer scorer({}, {{"There is pleural thickening.", 0.9}});
        RefineConfig top_cfg = cfg;
        top_cfg.policy = SupplementPolicy::top_similarity;
        auto chosen = select_supplement(ordered, scorer, top_cfg);
        REQUIRE(chosen.has_value());
        CHECK(chosen->first == "Generated positive 3 for pleural thickening.");
    }
}

TEST_CASE("append_global_negatives picks the top 3 undetected negatives") {
    const auto dict = build_manual_dictionary();

    SUBCASE("all detected: empty") {
        std::set<std::string> all;
        for (const auto& e : dict.entries) all.insert(e.name);
        GroupTableScorer scorer({}, {});
        CHECK(append_global_negatives(all, dict, scorer).empty());
    }

    SUBCASE("two undetected: both returned") {
        std::set<std::string> detected;
        for (const auto& e : dict.entries) detected.insert(e.name);
        detected.erase("edema");
        detected.erase("hernia");
        GroupTableScorer scorer({{"edema", 0.3}, {"hernia", 0.8}}, {});
        const auto negs = append_global_negatives(detected, dict, scorer);
        REQUIRE(negs.size() == 2);
        CHECK(negs[0].disease == "hernia");
        CHECK(negs[1].disease == "edema");
    }

    SUBCASE("brute-force oracle over randomized score tables") {
        Rng rng(32);
        for (int trial = 0; trial < 1000; ++trial) {
            std::map<std::string, double> table;
            std::map<std::string, double> by_disease;
            for (const auto& e : dict.entries) {
                const double score = static_cast<double>(rng.below(7)) / 6.0;  // ties likely
                table["No " + e.name + "."] = score;
                by_disease[e.name] = score;
            }
            class ExactScorer : public RefinementScorer {
            public:
                explicit ExactScorer(const std::map<std::string, double>& t) : t_(t) {}
                double similarity(const std::string& s) override { return t_.at(s); }
                double itm_match_probability(const std::string&) override { return 0.0; }

            private:
                const std::map<std::string, double>& t_;
            } scorer(table);

            const auto negs = append_global_negatives({}, dict, scorer);
            REQUIRE(negs.size() == 3);

            // oracle: repeated scan-max with dictionary-order ties
            std::set<std::string> taken;
            for (int k = 0; k < 3; ++k) {
                std::string best;
                double best_score = -1e300;
                for (const auto& e : dict.entries) {
                    if (taken.count(e.name)) continue;
                    if (by_disease[e.name] > best_score) {
                        best_score = by_disease[e.name];
                        best = e.name;
                    }
                }
                taken.insert(best);
                CHECK(negs[static_cast<size_t>(k)].disease == best);
            }
        }
    }
}

TEST_CASE("refine_report preserves originals and renders the parenthesis form") {
    const auto dict = pleural_dict();
    RefineConfig cfg;

    std::map<std::string, double> sim = {{"pleural", 0.2},
                                         {"Generated positive", 0.4},
                                         {"There is pleural thickening.", 0.5},
                                         {"No pleural", 0.0},
                                         {"Generated negative", 0.0},
                                         {"Heart", 0.0}};
    GroupTableScorer scorer(sim, {{"There is pleural thickening.", 0.9}});

    const std::string report = "Heart size is normal. The pleural surfaces are smooth.";
    const RefinedReport rr = refine_report(report, dict, scorer, cfg);
    REQUIRE(rr.sentences.size() == 2);
    CHECK(rr.sentences[0].original == "Heart size is normal.");
    CHECK(!rr.sentences[0].supplement.has_value());  // no keyword hit
    CHECK(rr.sentences[1].original == "The pleural surfaces are smooth.");
    REQUIRE(rr.sentences[1].supplement.has_value());
    CHECK(*rr.sentences[1].supplement == "There is pleural thickening.");
    CHECK(rr.detected_diseases ==
          std::set<std::string>{"pleural thickening", "pleural effusion"});
    CHECK(rr.global_negatives.empty());  // both diseases detected

    const std::string text = render_refined_text(rr);
    CHECK(text ==
          "Heart size is normal. The pleural surfaces are smooth. (There is pleural thickening).");
    // the rendered text splits back into the same original sentences plus the supplement
    const auto resplit = split_sentences(text);
    REQUIRE(resplit.size() == 3);
    CHECK(resplit[0] == "Heart size is normal.");
    CHECK(resplit[1] == "The pleural surfaces are smooth.");
    CHECK(resplit[2] == "(There is pleural thickening).");
}

TEST_CASE("refine_report with no hits passes sentences through, adds negatives") {
    const auto dict = build_manual_dictionary();
    GroupTableScorer scorer({{"No ", 0.1}}, {});
    const std::string report = "The exam is unremarkable. Comparison with prior study.";
    const RefinedReport rr = refine_report(report, dict, scorer, RefineConfig{});
    for (const auto& s : rr.sentences) CHECK(!s.supplement.has_value());
    CHECK(rr.detected_diseases.empty());
    CHECK(rr.global_negatives.size() == 3);
    for (const auto& g : rr.global_negatives) CHECK(g.text.rfind("No ", 0) == 0);
}

TEST_CASE("mock scorer fixture and byte-identical refinement output") {
    const fs::path dir = fs::temp_directory_path() / "medalign_mock";
    fs::remove_all(dir);
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "mock.json");
        out << R"({"similarity": {"There is edema.": 0.8, "No edema.": 0.1,
                                  "Basilar edema noted.": 0.5,
                                  "No atelectasis.": 0.3, "No mass.": 0.2, "No hernia.": 0.1,
                                  "No pneumonia.": 0.05},
                   "itm": {"There is edema.": 0.95, "No edema.": 0.1}})";
    }
    auto scorer = MockScorer::from_json_file(dir / "mock.json");
    CHECK(scorer.similarity("There is edema.") == doctest::Approx(0.8));
    CHECK(scorer.itm_match_probability("There is edema.") == doctest::Approx(0.95));
    CHECK_THROWS(scorer.similarity("unknown sentence"));

    ClinicalDictionary dict;
    dict.source = DictionarySource::custom;
    for (const std::string name : {"edema", "atelectasis", "mass", "hernia", "pneumonia"}) {
        DiseaseEntry e;
        e.name = name;
        e.keywords = {name};
        e.positives = {"There is " + name + "."};
        e.negatives = {"No " + name + "."};
        dict.entries.push_back(std::move(e));
    }

    const std::string report = "Basilar edema noted.";
    auto scorer2 = MockScorer::from_json_file(dir / "mock.json");
    const std::string j1 = refined_report_to_json(
        refine_report(report, dict, scorer, RefineConfig{}), "s1", true);
    const std::string j2 = refined_report_to_json(
        refine_report(report, dict, scorer2, RefineConfig{}), "s1", true);
    CHECK(j1 == j2);
    CHECK(j1.find("\"supplement\":\"There is edema.\"") != std::string::npos);
}

TEST_CASE("raising the itm threshold never adds supplements") {
    const auto dict = pleural_dict();
    std::map<std::string, double> sim = {{"pleural", 0.2},
                                         {"Generated positive", 0.4},
                                         {"There is pleural", 0.5},
                                         {"No pleural", 0.05},
                                         {"Generated negative", 0.0}};
    const std::string report =
        "The pleural surfaces are smooth. Mild pleural reaction on the left. No pleural abnormality.";
    int prev = 1000;
    for (double threshold : {0.0, 0.25, 0.5, 0.75, 1.0}) {
        GroupTableScorer scorer(sim, {{"There is pleural thickening.", 0.6},
                                      {"There is pleural effusion.", 0.4},
                                      {"No pleural thickening.", 0.3},
                                      {"No pleural effusion.", 0.2}});
        RefineConfig cfg;
        cfg.itm_threshold = threshold;
        const RefinedReport rr = refine_report(report, dict, scorer, cfg);
        int supplements = 0;
        for (const auto& s : rr.sentences) supplements += s.supplement.has_value() ? 1 : 0;
        CHECK(supplements <= prev);
        prev = supplements;
    }
}

TEST_CASE("manual_template policy only injects dictionary sentences") {
    const auto dict = pleural_dict();
    Rng rng(33);
    std::set<std::string> dictionary_sentences;
    for (const auto& e : dict.entries) {
        for (const auto& s : e.positives) dictionary_sentences.insert(s);
        for (const auto& s : e.negatives) dictionary_sentences.insert(s);
    }
    for (int trial = 0; trial < 50; ++trial) {
        std::map<std::string, double> sim;
        std::map<std::string, double> itm;
        for (const auto& s : dictionary_sentences) {
            sim[s] = rng.uniform();
            itm[s] = rng.uniform();
        }
        sim["pleural"] = rng.uniform();  // fallback for the original sentence
        GroupTableScorer scorer(sim, itm);
        const RefinedReport rr =
            refine_report("Trace pleural changes persist.", dict, scorer, RefineConfig{});
        for (const auto& s : rr.sentences) {
            if (s.supplement) CHECK(dictionary_sentences.count(*s.supplement) == 1);
        }
    }
}
