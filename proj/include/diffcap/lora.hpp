#pragma once

#include <string>
#include <vector>

#include "diffcap/nn.hpp"

namespace diffcap {

// Low-rank update attached to one base linear map. With down (r x in) and
// up (out x r), the adapted map is y = W x + (alpha / r) * up * (down * x).
// up starts at zero, so a fresh adapter reproduces the base map exactly.
struct LoraAdapter {
    std::string target;  // name of the adapted weight
    int rank = 0;
    double alpha = 0.0;
    Param* down = nullptr;  // rank x in
    Param* up = nullptr;    // out x rank

    double scaling() const { return alpha / rank; }
};

struct LoraConfig {
    int rank = 8;
    double alpha = 16.0;
    // Suffixes of decoder linear maps to adapt.
    std::vector<std::string> targets = {"attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2"};
};

LoraAdapter make_lora(ParamStore& ps, Rng& rng, const std::string& target_name, int out_dim,
                      int in_dim, int rank, double alpha);

// y = x W^T (+bias) + scaling * (x down^T) up^T
Var lora_apply(Tape& t, Binder& bind, const LinearP& base, const LoraAdapter& ad, Var x);

// W += scaling * up * down, done in place on the base weight.
void lora_merge(const LoraAdapter& ad, Matrix& base_weight);

}  // namespace diffcap
