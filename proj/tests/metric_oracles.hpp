#pragma once

// Brute-force reference scorers for the caption metrics, written from the
// formulas with plain token-vector comparisons (no shared helpers with the
// library implementation).

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "diffcap/metrics.hpp"

namespace metric_oracle {

using Toks = std::vector<std::string>;

inline Toks toks(const std::string& text) {
    // Independent re-derivation of the tokenization rule.
    Toks out;
    std::string cur;
    auto flush = [&]() {
        if (!cur.empty()) out.push_back(cur);
        cur.clear();
    };
    for (char raw : text) {
        const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
        if (c == ' ' || c == '\t' || c == '\n') {
            flush();
        } else if (c == '.' || c == ',' || c == '!' || c == '?' || c == ';' || c == ':') {
            flush();
            out.push_back(std::string(1, c));
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return out;
}

inline std::vector<Toks> ngrams(const Toks& t, int n) {
    std::vector<Toks> out;
    for (size_t i = 0; i + n <= t.size(); ++i) out.push_back(Toks(t.begin() + i, t.begin() + i + n));
    return out;
}

inline int count_of(const std::vector<Toks>& grams, const Toks& g) {
    int n = 0;
    for (const Toks& x : grams) {
        if (x == g) ++n;
    }
    return n;
}

inline double bleu4(const std::vector<diffcap::EvalInstance>& corpus) {
    double num[5] = {0, 0, 0, 0, 0}, den[5] = {0, 0, 0, 0, 0};
    long c_len = 0, r_len = 0;
    for (const auto& inst : corpus) {
        const Toks cand = toks(inst.candidate);
        c_len += static_cast<long>(cand.size());
        long best_ref = -1;
        for (const std::string& r : inst.references) {
            const long len = static_cast<long>(toks(r).size());
            if (best_ref < 0 ||
                std::labs(len - (long)cand.size()) < std::labs(best_ref - (long)cand.size()) ||
                (std::labs(len - (long)cand.size()) == std::labs(best_ref - (long)cand.size()) &&
                 len < best_ref)) {
                best_ref = len;
            }
        }
        r_len += best_ref;
        for (int n = 1; n <= 4; ++n) {
            const auto cg = ngrams(cand, n);
            std::vector<Toks> uniq;
            for (const Toks& g : cg) {
                if (count_of(uniq, g) == 0) uniq.push_back(g);
            }
            for (const Toks& g : uniq) {
                const int in_cand = count_of(cg, g);
                int best = 0;
                for (const std::string& r : inst.references) {
                    best = std::max(best, count_of(ngrams(toks(r), n), g));
                }
                num[n] += std::min(in_cand, best);
            }
            den[n] += static_cast<double>(cg.size());
        }
    }
    double geo = 0.0;
    for (int n = 1; n <= 4; ++n) {
        if (den[n] == 0 || num[n] == 0) return 0.0;
        geo += std::log(num[n] / den[n]) / 4.0;
    }
    const double bp = c_len < r_len ? std::exp(1.0 - double(r_len) / double(c_len)) : 1.0;
    return bp * std::exp(geo);
}

inline int lcs_rec(const Toks& a, const Toks& b, size_t i, size_t j,
                   std::map<std::pair<size_t, size_t>, int>& memo) {
    if (i == a.size() || j == b.size()) return 0;
    const auto key = std::make_pair(i, j);
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    int best;
    if (a[i] == b[j]) {
        best = 1 + lcs_rec(a, b, i + 1, j + 1, memo);
    } else {
        best = std::max(lcs_rec(a, b, i + 1, j, memo), lcs_rec(a, b, i, j + 1, memo));
    }
    memo[key] = best;
    return best;
}

inline double rouge_l(const diffcap::EvalInstance& inst) {
    const double beta = 1.2;
    const Toks cand = toks(inst.candidate);
    double best = 0.0;
    for (const std::string& r : inst.references) {
        const Toks ref = toks(r);
        if (cand.empty() || ref.empty()) continue;
        std::map<std::pair<size_t, size_t>, int> memo;
        const int l = lcs_rec(cand, ref, 0, 0, memo);
        if (l == 0) continue;
        const double p = double(l) / cand.size();
        const double rr = double(l) / ref.size();
        best = std::max(best, (1 + beta * beta) * p * rr / (rr + beta * beta * p));
    }
    return best;
}

inline std::vector<double> cider_d(const std::vector<diffcap::EvalInstance>& corpus) {
    const double sigma = 6.0;
    const double logN = std::log(double(corpus.size()));
    // document frequency per (n, gram)
    std::map<std::pair<int, Toks>, double> df;
    for (const auto& inst : corpus) {
        std::set<std::pair<int, Toks>> seen;
        for (const std::string& r : inst.references) {
            for (int n = 1; n <= 4; ++n) {
                for (const Toks& g : ngrams(toks(r), n)) seen.insert({n, g});
            }
        }
        for (const auto& k : seen) df[k] += 1.0;
    }
    auto tfidf = [&](const Toks& t, int n) {
        std::map<Toks, double> v;
        const auto grams = ngrams(t, n);
        for (const Toks& g : grams) {
            if (v.count(g)) continue;
            const double d = df.count({n, g}) ? df[{n, g}] : 0.0;
            v[g] = count_of(grams, g) * (logN - std::log(std::max(1.0, d)));
        }
        return v;
    };
    std::vector<double> scores;
    for (const auto& inst : corpus) {
        const Toks cand = toks(inst.candidate);
        double total = 0.0;
        for (const std::string& r : inst.references) {
            const Toks ref = toks(r);
            const double delta = double(cand.size()) - double(ref.size());
            double per_n = 0.0;
            for (int n = 1; n <= 4; ++n) {
                const auto vc = tfidf(cand, n);
                const auto vr = tfidf(ref, n);
                double dot = 0, nc = 0, nr = 0;
                for (const auto& [g, w] : vc) {
                    nc += w * w;
                    auto it = vr.find(g);
                    if (it != vr.end()) dot += std::min(w, it->second) * it->second;
                }
                for (const auto& [g, w] : vr) nr += w * w;
                if (nc > 0 && nr > 0) {
                    per_n += std::exp(-delta * delta / (2 * sigma * sigma)) * dot /
                             (std::sqrt(nc) * std::sqrt(nr));
                }
            }
            total += per_n / 4.0;
        }
        scores.push_back(total / double(inst.references.size()));
    }
    return scores;
}

// Exhaustive alignment: every injective mapping of candidate words to
// matching reference words, maximizing matches then minimizing chunks.
struct Alignment {
    int matches = 0;
    int chunks = 0;
};

inline void meteor_dfs(const std::vector<std::vector<int>>& edges, size_t i, std::vector<int>& used,
                       int matches, int chunks, int last_j, Alignment& best) {
    if (i == edges.size()) {
        if (matches > best.matches || (matches == best.matches && chunks < best.chunks)) {
            best = {matches, chunks};
        }
        return;
    }
    meteor_dfs(edges, i + 1, used, matches, chunks, -5, best);
    for (int j : edges[i]) {
        if (used[j]) continue;
        used[j] = 1;
        meteor_dfs(edges, i + 1, used, matches + 1, chunks + ((j == last_j + 1) ? 0 : 1), j, best);
        used[j] = 0;
    }
}

inline double meteor_simple(const diffcap::EvalInstance& inst) {
    const Toks cand = toks(inst.candidate);
    double best_score = 0.0;
    for (const std::string& r : inst.references) {
        const Toks ref = toks(r);
        if (cand.empty() || ref.empty()) continue;
        std::vector<std::vector<int>> edges(cand.size());
        for (size_t i = 0; i < cand.size(); ++i) {
            for (size_t j = 0; j < ref.size(); ++j) {
                if (cand[i] == ref[j] ||
                    diffcap::stem_word(cand[i]) == diffcap::stem_word(ref[j])) {
                    edges[i].push_back(static_cast<int>(j));
                }
            }
        }
        Alignment best{0, 0};
        std::vector<int> used(ref.size(), 0);
        meteor_dfs(edges, 0, used, 0, 0, -5, best);
        if (best.matches == 0) continue;
        const double p = double(best.matches) / cand.size();
        const double rr = double(best.matches) / ref.size();
        const double f = 10 * p * rr / (rr + 9 * p);
        const double pen = 0.5 * std::pow(double(best.chunks) / best.matches, 3.0);
        best_score = std::max(best_score, f * (1 - pen));
    }
    return best_score;
}

}  // namespace metric_oracle
