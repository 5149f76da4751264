#include "medalign/refinement.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>

namespace medalign {

using json = nlohmann::json;
using nn::Matrix;

namespace {

std::string lowercase(const std::string& s) {
    std::string out = s;
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::string strip_terminators(const std::string& s) {
    size_t e = s.size();
    while (e > 0 && (s[e - 1] == '.' || s[e - 1] == '!' || s[e - 1] == '?')) --e;
    return s.substr(0, e);
}

}  // namespace

std::string to_string(GroupKind k) {
    switch (k) {
        case GroupKind::original: return "original";
        case GroupKind::positive: return "positive";
        case GroupKind::negative: return "negative";
    }
    return "original";
}

std::string to_string(SupplementPolicy p) {
    return p == SupplementPolicy::manual_template ? "manual_template" : "top_similarity";
}

SupplementPolicy supplement_policy_from_string(const std::string& s) {
    if (s == "manual_template") return SupplementPolicy::manual_template;
    if (s == "top_similarity") return SupplementPolicy::top_similarity;
    throw std::invalid_argument("unknown supplement policy '" + s + "'");
}

ModelScorer::ModelScorer(const Matrix& image, const ModelState& state)
    : state_(state), image_repr_(encode_image(image, state)) {}

double ModelScorer::similarity(const std::string& sentence) {
    return score_sentence_repr(image_repr_, sentence, state_);
}

double ModelScorer::itm_match_probability(const std::string& sentence) {
    const auto tokens = tokenize({sentence}, state_.vocab()).token_ids;
    return itm_softmax(itm_forward(image_repr_, tokens, state_))[0];
}

MockScorer::MockScorer(std::map<std::string, double> similarity, std::map<std::string, double> itm)
    : similarity_(std::move(similarity)), itm_(std::move(itm)) {}

MockScorer MockScorer::from_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("mock scorer: cannot read " + path.string());
    json j = json::parse(in);
    return MockScorer(j.at("similarity").get<std::map<std::string, double>>(),
                      j.at("itm").get<std::map<std::string, double>>());
}

double MockScorer::similarity(const std::string& sentence) {
    auto it = similarity_.find(sentence);
    if (it == similarity_.end())
        throw std::out_of_range("mock scorer: no similarity entry for '" + sentence + "'");
    return it->second;
}

double MockScorer::itm_match_probability(const std::string& sentence) {
    auto it = itm_.find(sentence);
    if (it == itm_.end())
        throw std::out_of_range("mock scorer: no itm entry for '" + sentence + "'");
    return it->second;
}

std::set<std::string> detect_keywords(const std::string& sentence, const KeywordIndex& index) {
    const std::string hay = lowercase(sentence);
    std::set<std::string> out;
    for (const auto& [keyword, diseases] : index) {
        if (hay.find(keyword) != std::string::npos) out.insert(diseases.begin(), diseases.end());
    }
    return out;
}

std::vector<SentenceGroup> assemble_groups(const std::string& sentence,
                                           const std::set<std::string>& detected,
                                           const ClinicalDictionary& dict) {
    if (detected.empty())
        throw std::invalid_argument("assemble_groups: no detected diseases; sentence passes through");
    std::vector<SentenceGroup> groups;
    SentenceGroup original;
    original.kind = GroupKind::original;
    original.sentences.push_back({sentence, 0.0});
    original.representative = sentence;
    original.original_position = 0;
    groups.push_back(std::move(original));

    for (const auto& e : dict.entries) {  // dictionary order
        if (!detected.count(e.name)) continue;
        SentenceGroup pos;
        pos.kind = GroupKind::positive;
        pos.disease = e.name;
        for (const auto& s : e.positives) pos.sentences.push_back({s, 0.0});
        pos.representative = e.positives.front();
        pos.original_position = static_cast<int>(groups.size());
        groups.push_back(std::move(pos));

        SentenceGroup neg;
        neg.kind = GroupKind::negative;
        neg.disease = e.name;
        for (const auto& s : e.negatives) neg.sentences.push_back({s, 0.0});
        neg.representative = e.negatives.front();
        neg.original_position = static_cast<int>(groups.size());
        groups.push_back(std::move(neg));
    }
    return groups;
}

double score_sentence_repr(const ImageRepr& image_repr, const std::string& sentence,
                           const ModelState& state) {
    const SentenceSplit split = tokenize({sentence}, state.vocab());
    const TextRepr text = encode_text(split, state, 0.0).first;
    // K_t = 1: the matching score reduces to <context_1, text_1>
    const AlignmentResult a = local_alignment(text.local, image_repr.local, state.config().tau2,
                                              state.config().tau3);
    return a.match_score;
}

double score_sentence(const Matrix& image, const std::string& sentence, const ModelState& state) {
    return score_sentence_repr(encode_image(image, state), sentence, state);
}

void score_groups(std::vector<SentenceGroup>& groups, RefinementScorer& scorer) {
    for (auto& g : groups) {
        double sum = 0.0;
        for (auto& s : g.sentences) {
            s.score = scorer.similarity(s.text);
            sum += s.score;
        }
        g.avg_score = sum / static_cast<double>(g.sentences.size());
    }
}

std::vector<SentenceGroup> order_groups(const std::vector<SentenceGroup>& groups) {
    std::vector<SentenceGroup> ordered = groups;
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const SentenceGroup& a, const SentenceGroup& b) {
                         return a.avg_score > b.avg_score;
                     });
    for (auto& g : ordered) {
        std::sort(g.sentences.begin(), g.sentences.end(),
                  [](const ScoredSentence& a, const ScoredSentence& b) {
                      if (a.score != b.score) return a.score > b.score;
                      return a.text < b.text;
                  });
    }
    return ordered;
}

namespace {

std::pair<std::string, SupplementProvenance> supplement_from(const SentenceGroup& group, int rank,
                                                             double itm_prob,
                                                             const RefineConfig& config) {
    std::string text;
    double similarity = 0.0;
    if (config.policy == SupplementPolicy::manual_template) {
        text = group.representative;
        for (const auto& s : group.sentences) {
            if (s.text == group.representative) {
                similarity = s.score;
                break;
            }
        }
    } else {
        text = group.sentences.front().text;  // sorted descending
        similarity = group.sentences.front().score;
    }
    SupplementProvenance prov;
    prov.disease = group.disease;
    prov.kind = group.kind;
    prov.group_rank = rank;
    prov.similarity = similarity;
    prov.itm_probability = itm_prob;
    return {text, prov};
}

}  // namespace

std::optional<std::pair<std::string, SupplementProvenance>> select_supplement(
    const std::vector<SentenceGroup>& ordered, RefinementScorer& scorer,
    const RefineConfig& config) {
    int original_rank = -1;
    for (size_t i = 0; i < ordered.size(); ++i) {
        if (ordered[i].kind == GroupKind::original) {
            if (original_rank != -1)
                throw std::invalid_argument("select_supplement: more than one original group");
            original_rank = static_cast<int>(i);
        }
    }
    if (original_rank == -1) throw std::invalid_argument("select_supplement: no original group");

    if (original_rank == 0) {
        // only the second-ranked group is assessed
        if (ordered.size() < 2) return std::nullopt;
        const SentenceGroup& g = ordered[1];
        const double p = scorer.itm_match_probability(g.representative);
        if (p >= config.itm_threshold) return supplement_from(g, 1, p, config);
        return std::nullopt;
    }
    for (int i = 0; i < original_rank; ++i) {
        const SentenceGroup& g = ordered[static_cast<size_t>(i)];
        const double p = scorer.itm_match_probability(g.representative);
        if (p >= config.itm_threshold) return supplement_from(g, i, p, config);
    }
    return std::nullopt;
}

std::vector<GlobalNegative> append_global_negatives(const std::set<std::string>& detected,
                                                    const ClinicalDictionary& dict,
                                                    RefinementScorer& scorer) {
    std::vector<GlobalNegative> candidates;
    for (const auto& e : dict.entries) {
        if (detected.count(e.name)) continue;
        GlobalNegative g;
        g.disease = e.name;
        g.text = e.negatives.front();  // manual template
        g.score = scorer.similarity(g.text);
        candidates.push_back(std::move(g));
    }
    // stable: ties keep dictionary order
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const GlobalNegative& a, const GlobalNegative& b) {
                         return a.score > b.score;
                     });
    if (candidates.size() > 3) candidates.resize(3);
    return candidates;
}

RefinedReport refine_report(const std::string& report, const ClinicalDictionary& dict,
                            RefinementScorer& scorer, const RefineConfig& config) {
    const KeywordIndex index = keyword_index(dict);
    RefinedReport out;
    for (const auto& sentence : split_sentences(report)) {
        RefinedSentence rs;
        rs.original = sentence;
        const std::set<std::string> detected = detect_keywords(sentence, index);
        if (!detected.empty()) {
            out.detected_diseases.insert(detected.begin(), detected.end());
            std::vector<SentenceGroup> groups = assemble_groups(sentence, detected, dict);
            score_groups(groups, scorer);
            const std::vector<SentenceGroup> ordered = order_groups(groups);
            if (auto chosen = select_supplement(ordered, scorer, config)) {
                rs.supplement = chosen->first;
                rs.provenance = chosen->second;
            }
        }
        out.sentences.push_back(std::move(rs));
    }
    out.global_negatives = append_global_negatives(out.detected_diseases, dict, scorer);
    return out;
}

RefinedReport refine_report(const Matrix& image, const std::string& report,
                            const ClinicalDictionary& dict, const ModelState& state,
                            const RefineConfig& config) {
    ModelScorer scorer(image, state);
    return refine_report(report, dict, scorer, config);
}

std::string render_refined_text(const RefinedReport& report) {
    std::string out;
    for (const auto& s : report.sentences) {
        if (!out.empty()) out += " ";
        out += s.original;
        if (s.supplement) out += " (" + strip_terminators(*s.supplement) + ").";
    }
    for (const auto& g : report.global_negatives) {
        if (!out.empty()) out += " ";
        out += g.text;
    }
    return out;
}

std::string refined_report_to_json(const RefinedReport& report, const std::string& sample_id,
                                   bool refined) {
    json j;
    j["sample_id"] = sample_id;
    j["refined"] = refined;
    j["refined_text"] = render_refined_text(report);
    j["sentences"] = json::array();
    for (const auto& s : report.sentences) {
        json js;
        js["original"] = s.original;
        if (s.supplement) {
            js["supplement"] = *s.supplement;
            json p;
            p["disease"] = s.provenance->disease;
            p["kind"] = to_string(s.provenance->kind);
            p["group_rank"] = s.provenance->group_rank;
            p["similarity"] = s.provenance->similarity;
            p["itm_probability"] = s.provenance->itm_probability;
            js["provenance"] = p;
        } else {
            js["supplement"] = nullptr;
        }
        j["sentences"].push_back(js);
    }
    j["global_negatives"] = json::array();
    for (const auto& g : report.global_negatives) {
        json jg;
        jg["disease"] = g.disease;
        jg["text"] = g.text;
        jg["score"] = g.score;
        j["global_negatives"].push_back(jg);
    }
    return j.dump();
}

}  // namespace medalign
