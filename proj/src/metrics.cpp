#include "diffcap/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "diffcap/tokenizer.hpp"
#include "json.hpp"

namespace diffcap {

using nlohmann::json;

std::vector<std::string> metric_tokenize(const std::string& text) { return tokenize_text(text); }

std::string stem_word(const std::string& word) {
    auto ends_with = [&](const char* suffix) {
        const size_t n = std::strlen(suffix);
        return word.size() >= n && word.compare(word.size() - n, n, suffix) == 0;
    };
    auto keep = [&](size_t cut) { return word.size() - cut >= 3; };
    if (ends_with("sses")) return word.substr(0, word.size() - 2);
    if (ends_with("ies")) return word.substr(0, word.size() - 2);
    if (ends_with("ing") && keep(3)) return word.substr(0, word.size() - 3);
    if (ends_with("ed") && keep(2)) return word.substr(0, word.size() - 2);
    if (ends_with("ly") && keep(2)) return word.substr(0, word.size() - 2);
    if (ends_with("s") && !ends_with("ss") && keep(1)) return word.substr(0, word.size() - 1);
    return word;
}

namespace {

using Tokens = std::vector<std::string>;

std::map<std::string, int> ngram_counts(const Tokens& toks, int n) {
    std::map<std::string, int> counts;
    if (static_cast<int>(toks.size()) < n) return counts;
    for (size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key = toks[i];
        for (int k = 1; k < n; ++k) key += "\x1f" + toks[i + k];
        counts[key]++;
    }
    return counts;
}

}  // namespace

double bleu4(const std::vector<EvalInstance>& corpus) {
    long clipped[4] = {0, 0, 0, 0};
    long totals[4] = {0, 0, 0, 0};
    long cand_len = 0;
    long ref_len = 0;
    for (const EvalInstance& inst : corpus) {
        const Tokens cand = metric_tokenize(inst.candidate);
        std::vector<Tokens> refs;
        for (const std::string& r : inst.references) refs.push_back(metric_tokenize(r));
        cand_len += static_cast<long>(cand.size());
        // Closest reference length; ties resolved toward the shorter one.
        long best = refs.empty() ? 0 : static_cast<long>(refs[0].size());
        for (const Tokens& r : refs) {
            const long len = static_cast<long>(r.size());
            const long cur = std::labs(len - static_cast<long>(cand.size()));
            const long old = std::labs(best - static_cast<long>(cand.size()));
            if (cur < old || (cur == old && len < best)) best = len;
        }
        ref_len += best;
        for (int n = 1; n <= 4; ++n) {
            const auto cc = ngram_counts(cand, n);
            std::map<std::string, int> max_ref;
            for (const Tokens& r : refs) {
                for (const auto& [g, k] : ngram_counts(r, n)) {
                    max_ref[g] = std::max(max_ref[g], k);
                }
            }
            for (const auto& [g, k] : cc) {
                totals[n - 1] += k;
                auto it = max_ref.find(g);
                if (it != max_ref.end()) clipped[n - 1] += std::min(k, it->second);
            }
        }
    }
    double log_sum = 0.0;
    for (int n = 0; n < 4; ++n) {
        if (totals[n] == 0 || clipped[n] == 0) return 0.0;
        log_sum += std::log(static_cast<double>(clipped[n]) / totals[n]);
    }
    const double bp =
        cand_len < ref_len ? std::exp(1.0 - static_cast<double>(ref_len) / cand_len) : 1.0;
    return bp * std::exp(log_sum / 4.0);
}

namespace {

int lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<int> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (size_t i = 1; i <= a.size(); ++i) {
        for (size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

double rouge_l_instance(const EvalInstance& inst) {
    constexpr double kBeta = 1.2;
    const Tokens cand = metric_tokenize(inst.candidate);
    double best = 0.0;
    for (const std::string& r : inst.references) {
        const Tokens ref = metric_tokenize(r);
        if (cand.empty() || ref.empty()) continue;
        const int lcs = lcs_length(cand, ref);
        if (lcs == 0) continue;
        const double p = static_cast<double>(lcs) / cand.size();
        const double rr = static_cast<double>(lcs) / ref.size();
        const double denom = rr + kBeta * kBeta * p;
        if (denom > 0) best = std::max(best, (1.0 + kBeta * kBeta) * p * rr / denom);
    }
    return best;
}

namespace {

struct AlignSearch {
    const std::vector<std::vector<int>>& edges;  // candidate pos -> matching ref positions
    std::vector<char> used;
    std::vector<int> suffix_potential;
    long budget;
    bool truncated = false;
    int best_matches = -1;
    int best_chunks = 0;

    void dfs(size_t i, int matches, int chunks, int last_j) {
        if (budget-- <= 0) {
            truncated = true;
            return;
        }
        if (i == edges.size()) {
            if (matches > best_matches || (matches == best_matches && chunks < best_chunks)) {
                best_matches = matches;
                best_chunks = chunks;
            }
            return;
        }
        const int potential = matches + suffix_potential[i];
        if (potential < best_matches) return;
        if (potential == best_matches && chunks > best_chunks) return;
        for (int j : edges[i]) {
            if (used[j]) continue;
            used[j] = 1;
            const bool contiguous = last_j >= 0 && j == last_j + 1;
            dfs(i + 1, matches + 1, chunks + (contiguous ? 0 : 1), j);
            used[j] = 0;
            if (truncated) return;
        }
        dfs(i + 1, matches, chunks, -2);  // leave candidate word unmatched
    }
};

}  // namespace

MeteorAlignment meteor_align(const Tokens& cand, const Tokens& ref) {
    std::vector<std::string> cand_stem(cand.size()), ref_stem(ref.size());
    for (size_t i = 0; i < cand.size(); ++i) cand_stem[i] = stem_word(cand[i]);
    for (size_t j = 0; j < ref.size(); ++j) ref_stem[j] = stem_word(ref[j]);

    std::vector<std::vector<int>> edges(cand.size());
    for (size_t i = 0; i < cand.size(); ++i) {
        for (size_t j = 0; j < ref.size(); ++j) {
            if (cand[i] == ref[j] || cand_stem[i] == ref_stem[j]) {
                edges[i].push_back(static_cast<int>(j));
            }
        }
    }

    AlignSearch search{edges, std::vector<char>(ref.size(), 0), {}, 500000};
    search.suffix_potential.assign(cand.size() + 1, 0);
    for (int i = static_cast<int>(cand.size()) - 1; i >= 0; --i) {
        search.suffix_potential[i] = search.suffix_potential[i + 1] + (edges[i].empty() ? 0 : 1);
    }
    search.dfs(0, 0, 0, -2);

    MeteorAlignment out;
    if (!search.truncated) {
        out.matches = std::max(0, search.best_matches);
        out.chunks = search.best_chunks;
        return out;
    }
    // Greedy two-stage fallback for adversarially repetitive inputs: exact
    // matches leftmost first, then stem matches on the remainder.
    out.search_truncated = true;
    std::vector<int> assign(cand.size(), -1);
    std::vector<char> used(ref.size(), 0);
    for (int stage = 0; stage < 2; ++stage) {
        for (size_t i = 0; i < cand.size(); ++i) {
            if (assign[i] >= 0) continue;
            for (size_t j = 0; j < ref.size(); ++j) {
                if (used[j]) continue;
                const bool ok = stage == 0 ? cand[i] == ref[j] : cand_stem[i] == ref_stem[j];
                if (ok) {
                    assign[i] = static_cast<int>(j);
                    used[j] = 1;
                    break;
                }
            }
        }
    }
    int last_j = -2;
    for (size_t i = 0; i < cand.size(); ++i) {
        if (assign[i] < 0) {
            last_j = -2;
            continue;
        }
        out.matches++;
        if (assign[i] != last_j + 1) out.chunks++;
        last_j = assign[i];
    }
    return out;
}

double meteor_simple_instance(const EvalInstance& inst) {
    const Tokens cand = metric_tokenize(inst.candidate);
    double best = 0.0;
    for (const std::string& r : inst.references) {
        const Tokens ref = metric_tokenize(r);
        if (cand.empty() || ref.empty()) continue;
        const MeteorAlignment a = meteor_align(cand, ref);
        if (a.matches == 0) continue;
        const double p = static_cast<double>(a.matches) / cand.size();
        const double rr = static_cast<double>(a.matches) / ref.size();
        const double f = 10.0 * p * rr / (rr + 9.0 * p);
        const double frag = static_cast<double>(a.chunks) / a.matches;
        const double penalty = 0.5 * frag * frag * frag;
        best = std::max(best, f * (1.0 - penalty));
    }
    return best;
}

CiderResult cider_d(const std::vector<EvalInstance>& corpus) {
    if (corpus.size() < 2) {
        throw std::invalid_argument("cider_d: corpus must contain at least 2 instances (idf is "
                                    "degenerate on a single instance)");
    }
    constexpr double kSigma = 6.0;
    const double log_ref_count = std::log(static_cast<double>(corpus.size()));

    // Document frequency: one count per instance whose references contain the n-gram.
    std::map<std::string, int> doc_freq;
    for (const EvalInstance& inst : corpus) {
        std::set<std::string> seen;
        for (const std::string& r : inst.references) {
            const Tokens toks = metric_tokenize(r);
            for (int n = 1; n <= 4; ++n) {
                for (const auto& [g, k] : ngram_counts(toks, n)) {
                    (void)k;
                    seen.insert(std::to_string(n) + "\x1e" + g);
                }
            }
        }
        for (const std::string& g : seen) doc_freq[g]++;
    }

    struct Vec {
        std::array<std::map<std::string, double>, 4> tfidf;
        std::array<double, 4> norm = {0, 0, 0, 0};
        long length = 0;
    };
    auto to_vec = [&](const Tokens& toks) {
        Vec v;
        v.length = static_cast<long>(toks.size());
        for (int n = 1; n <= 4; ++n) {
            for (const auto& [g, count] : ngram_counts(toks, n)) {
                auto it = doc_freq.find(std::to_string(n) + "\x1e" + g);
                const double df = it == doc_freq.end() ? 0.0 : it->second;
                const double idf = log_ref_count - std::log(std::max(1.0, df));
                const double w = count * idf;
                v.tfidf[n - 1][g] = w;
                v.norm[n - 1] += w * w;
            }
            v.norm[n - 1] = std::sqrt(v.norm[n - 1]);
        }
        return v;
    };

    CiderResult out;
    double total = 0.0;
    for (const EvalInstance& inst : corpus) {
        const Vec vc = to_vec(metric_tokenize(inst.candidate));
        double inst_score = 0.0;
        for (const std::string& r : inst.references) {
            const Vec vr = to_vec(metric_tokenize(r));
            const double delta = static_cast<double>(vc.length - vr.length);
            const double gaussian = std::exp(-delta * delta / (2.0 * kSigma * kSigma));
            double mean_n = 0.0;
            for (int n = 0; n < 4; ++n) {
                double dot = 0.0;
                for (const auto& [g, wc] : vc.tfidf[n]) {
                    auto it = vr.tfidf[n].find(g);
                    if (it != vr.tfidf[n].end()) dot += std::min(wc, it->second) * it->second;
                }
                if (vc.norm[n] > 0 && vr.norm[n] > 0) {
                    mean_n += gaussian * dot / (vc.norm[n] * vr.norm[n]);
                }
            }
            inst_score += mean_n / 4.0;
        }
        inst_score /= static_cast<double>(inst.references.size());
        out.per_instance.push_back(inst_score);
        total += inst_score;
    }
    out.corpus = total / static_cast<double>(corpus.size());
    return out;
}

const std::set<std::string> kAllMetricNames = {"bleu4", "rougeL", "ciderD", "meteorS"};

MetricReport evaluate_corpus(const std::vector<EvalInstance>& corpus,
                             const std::set<std::string>& metrics) {
    for (const std::string& m : metrics) {
        if (!kAllMetricNames.count(m)) throw std::invalid_argument("unknown metric " + m);
    }
    for (const EvalInstance& inst : corpus) {
        if (inst.references.empty()) {
            throw std::invalid_argument("instance " + inst.id + " has no references");
        }
    }
    MetricReport rep;
    int empty_candidates = 0;
    for (const EvalInstance& inst : corpus) {
        if (metric_tokenize(inst.candidate).empty()) ++empty_candidates;
    }
    if (empty_candidates > 0) {
        rep.notes["empty_candidates"] =
            std::to_string(empty_candidates) + " candidate(s) tokenize to nothing and score 0";
    }
    rep.notes["spice"] = "n/a: requires an external scene-graph parser, not computed";
    rep.notes["meteorS"] =
        "simplified METEOR (exact + suffix-stem matches only); not comparable to synonym-aware "
        "METEOR scores";
    rep.notes["ciderD_scale"] =
        "internal scores are the conventional CIDEr-D value divided by 10; the report scale is "
        "internal x100";
    rep.notes["tokenizer"] = "lowercase, whitespace and punctuation split";

    if (metrics.count("bleu4")) rep.bleu4 = bleu4(corpus);
    if (metrics.count("rougeL")) {
        double total = 0.0;
        for (const EvalInstance& inst : corpus) {
            const double s = rouge_l_instance(inst);
            rep.per_instance["rougeL"][inst.id] = s;
            total += s;
        }
        rep.rouge_l = corpus.empty() ? 0.0 : total / corpus.size();
    }
    if (metrics.count("meteorS")) {
        double total = 0.0;
        for (const EvalInstance& inst : corpus) {
            const double s = meteor_simple_instance(inst);
            rep.per_instance["meteorS"][inst.id] = s;
            total += s;
        }
        rep.meteor_s = corpus.empty() ? 0.0 : total / corpus.size();
    }
    if (metrics.count("ciderD")) {
        if (corpus.size() < 2) {
            rep.notes["ciderD"] = "n/a: single-instance corpus, idf degenerate";
        } else {
            const CiderResult c = cider_d(corpus);
            for (size_t i = 0; i < corpus.size(); ++i) {
                rep.per_instance["ciderD"][corpus[i].id] = c.per_instance[i];
            }
            rep.cider_d = c.corpus;
        }
    }
    return rep;
}

std::string MetricReport::to_json() const {
    json j;
    auto put = [&](const char* name, const std::optional<double>& v) {
        if (v.has_value()) {
            j["metrics"][name] = *v * 100.0;
            j["internal"][name] = *v;
        } else {
            j["metrics"][name] = nullptr;
        }
    };
    put("bleu4", bleu4);
    put("rougeL", rouge_l);
    put("ciderD", cider_d);
    put("meteorS", meteor_s);
    for (const auto& [metric, scores] : per_instance) {
        for (const auto& [id, s] : scores) j["per_instance"][metric][id] = s;
    }
    j["notes"] = notes;
    j["versions"] = {{"bleu4", "corpus, clipped, closest-ref brevity penalty"},
                     {"rougeL", "LCS F-measure, beta=1.2, max over references"},
                     {"ciderD", "n=1..4 tf-idf cosine, sigma=6, count clipping"},
                     {"meteorS", "exact+stem alignment, no synonym/paraphrase tables"}};
    return j.dump(2);
}

std::vector<EvalInstance> read_eval_files(const std::string& results_path,
                                          const std::string& references_path) {
    auto load = [](const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("cannot open " + path);
        json j;
        f >> j;
        if (!j.is_array()) throw std::runtime_error(path + ": expected a JSON array");
        return j;
    };
    const json results = load(results_path);
    const json references = load(references_path);

    std::map<std::string, std::string> cand;
    for (const json& r : results) {
        const std::string id = r.at("id").get<std::string>();
        if (cand.count(id)) throw std::runtime_error("duplicate result id " + id);
        cand[id] = r.at("caption").get<std::string>();
    }
    std::map<std::string, std::vector<std::string>> refs;
    for (const json& r : references) {
        const std::string id = r.at("id").get<std::string>();
        if (refs.count(id)) throw std::runtime_error("duplicate reference id " + id);
        refs[id] = r.at("captions").get<std::vector<std::string>>();
    }
    std::vector<std::string> missing_refs, missing_results;
    for (const auto& [id, c] : cand) {
        if (!refs.count(id)) missing_refs.push_back(id);
    }
    for (const auto& [id, r] : refs) {
        if (!cand.count(id)) missing_results.push_back(id);
    }
    if (!missing_refs.empty() || !missing_results.empty()) {
        std::string msg = "id mismatch between results and references;";
        if (!missing_refs.empty()) {
            msg += " ids missing from references:";
            for (const std::string& id : missing_refs) msg += " " + id;
            msg += ";";
        }
        if (!missing_results.empty()) {
            msg += " ids missing from results:";
            for (const std::string& id : missing_results) msg += " " + id;
        }
        throw std::runtime_error(msg);
    }
    if (cand.empty()) throw std::runtime_error("no ids in common between the two files");

    std::vector<EvalInstance> corpus;
    for (const auto& [id, c] : cand) {
        corpus.push_back(EvalInstance{id, c, refs[id]});
    }
    return corpus;
}

MetricReport evaluate_files(const std::string& results_path, const std::string& references_path,
                            const std::set<std::string>& metrics) {
    return evaluate_corpus(read_eval_files(results_path, references_path), metrics);
}

}  // namespace diffcap
