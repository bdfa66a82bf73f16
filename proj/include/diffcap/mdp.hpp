#pragma once

#include <utility>
#include <vector>

#include "diffcap/nn.hpp"

namespace diffcap {

// Differential-perception module. Per tapped encoder layer it gates the two
// feature streams against each other, projects a difference map, sharpens it
// with self-attention, fuses it back into both streams with cross-attention,
// and finally mixes the layers with learned per-channel scores.
struct MdpConfig {
    int channels = 64;
    int attention_heads = 4;
    int mlp_hidden = 128;
    std::vector<int> tapped_layers = {3, 4, 5, 6};
    // One parameter block shared across tapped layers by default.
    bool per_layer_params = false;

    void validate() const;
};

// Parameters for one block.
struct MdpBlockP {
    Param* w_m = nullptr;  // d x 2d, shared by both gate computations
    Param* w_p = nullptr;  // d x 3d
    AttnP sa;              // self-attention over the difference map
    AttnP fuse_ca;         // cross-attention: difference queries vs [f1;f2;diff]
    FfnP fuse_mlp;
    AttnP refine_ca;  // cross-attention: f_k queries vs [f_k;fused diff], shared for k=1,2
    LinearP score_fc1;  // 3d -> hidden
    LinearP score_fc2;  // hidden -> d, zero-initialized so initial scores are 0.5
};

struct MdpP {
    MdpConfig cfg;
    std::vector<MdpBlockP> blocks;  // size 1 when shared

    const MdpBlockP& block_for_layer(size_t layer_pos) const {
        return cfg.per_layer_params ? blocks[layer_pos] : blocks[0];
    }
};

MdpP make_mdp(ParamStore& ps, Rng& rng, const MdpConfig& cfg, const std::string& group = "mdp");

// Intermediate values for one layer, exposed for inspection in tests.
struct GatedDiff {
    Var lambda1, lambda2;  // T x d, entries in (0,1)
    Var fhat1, fhat2;      // gated features
    Var diff_slice;        // fhat1 - fhat2
    Var delta;             // T x d
};

struct MdpLayerTrace {
    GatedDiff gate;
    Var delta_sa;
    Var delta_ca;
    Var refined1, refined2;
    Var score;  // 1 x d, entries in [0,1]
};

// lambda_k = sigmoid(cat(f_k, f_other) W_m^T); fhat_k = f_k ⊙ lambda_k;
// delta = cat(fhat1, fhat2, fhat1 - fhat2) W_p^T.
GatedDiff gated_difference(Tape& t, Binder& bind, const MdpBlockP& blk, Var f1, Var f2);

Var self_attend_diff(Tape& t, Binder& bind, const MdpBlockP& blk, Var delta);

// Queries = delta_sa; keys/values = token-axis concat [f1; f2; delta_sa].
Var cross_fuse_diff(Tape& t, Binder& bind, const MdpBlockP& blk, Var delta_sa, Var f1, Var f2);

// Refined_k = cross-attention(queries = f_k, keys/values = [f_k; delta_ca]).
std::pair<Var, Var> refine_features(Tape& t, Binder& bind, const MdpBlockP& blk, Var f1, Var f2,
                                    Var delta_ca);

// Token-mean of [refined1 | refined2 | delta] through a two-layer map + sigmoid.
Var layer_score(Tape& t, Binder& bind, const MdpBlockP& blk, Var refined1, Var refined2, Var delta);

struct ScoredLayer {
    Var refined1, refined2;
    Var score;
};

// F'_k = sum_i score_i ⊙ refined_k_i (scores broadcast over tokens, unnormalized).
std::pair<Var, Var> integrate_multiscale(Tape& t, const std::vector<ScoredLayer>& layers);

struct MdpResult {
    Var fused1, fused2;
    std::vector<MdpLayerTrace> traces;
};

MdpResult mdp_forward(Tape& t, Binder& bind, const MdpP& p, const std::vector<Var>& pyramid1,
                      const std::vector<Var>& pyramid2);

}  // namespace diffcap
