#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace diffcap {

struct EvalInstance {
    std::string id;
    std::string candidate;
    std::vector<std::string> references;  // at least one
};

// Shared tokenization: lowercase, whitespace split, punctuation as tokens.
std::vector<std::string> metric_tokenize(const std::string& text);

// Rule-based suffix stemmer used by the simplified METEOR.
std::string stem_word(const std::string& word);

// Corpus-level BLEU-4: clipped modified n-gram precision (n = 1..4),
// geometric mean, brevity penalty from closest reference lengths. Any
// zero precision zeroes the score.
double bleu4(const std::vector<EvalInstance>& corpus);

// LCS F-measure with beta = 1.2, max over references.
double rouge_l_instance(const EvalInstance& instance);

struct MeteorAlignment {
    int matches = 0;
    int chunks = 0;
    bool search_truncated = false;  // fell back to the greedy stage alignment
};

// Unigram alignment on exact-or-stem matches, maximizing matches then
// minimizing chunks. Exposed for the alignment oracle tests.
MeteorAlignment meteor_align(const std::vector<std::string>& cand,
                             const std::vector<std::string>& ref);

// F_mean = 10PR / (R + 9P); penalty = 0.5 (chunks/matches)^3; max over refs.
double meteor_simple_instance(const EvalInstance& instance);

struct CiderResult {
    std::vector<double> per_instance;  // internal [0,1] scale
    double corpus = 0.0;
};

// tf-idf weighted n-gram cosine (n = 1..4) with count clipping and a
// length-difference Gaussian (sigma = 6), idf from this corpus's references.
// Internal scores live in [0,1]; multiply by 10 for the conventional scale.
// Throws on corpora with fewer than two instances (degenerate idf).
CiderResult cider_d(const std::vector<EvalInstance>& corpus);

struct MetricReport {
    std::optional<double> bleu4;  // internal [0,1] scale
    std::optional<double> rouge_l;
    std::optional<double> cider_d;
    std::optional<double> meteor_s;
    std::map<std::string, std::map<std::string, double>> per_instance;  // metric -> id -> score
    std::map<std::string, std::string> notes;

    // External scale is x100.
    std::string to_json() const;
};

extern const std::set<std::string> kAllMetricNames;  // bleu4 rougeL ciderD meteorS

MetricReport evaluate_corpus(const std::vector<EvalInstance>& corpus,
                             const std::set<std::string>& metrics = kAllMetricNames);

// results: JSON array of {"id","caption"}; references: {"id","captions"}.
// Ids must match exactly on both sides.
MetricReport evaluate_files(const std::string& results_path, const std::string& references_path,
                            const std::set<std::string>& metrics = kAllMetricNames);

std::vector<EvalInstance> read_eval_files(const std::string& results_path,
                                          const std::string& references_path);

}  // namespace diffcap
