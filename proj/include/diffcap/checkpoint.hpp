#pragma once

#include <memory>
#include <string>

#include "diffcap/model.hpp"
#include "diffcap/tokenizer.hpp"

namespace diffcap {

// Self-describing binary container: magic, version, JSON header (config,
// seed, vocabulary, named parameter segments per group), then raw
// little-endian doubles. Byte layout documented in docs/checkpoint_format.md.
void save_checkpoint(const std::string& path, const Model& model, const Vocab& vocab,
                     uint64_t seed);

struct LoadedCheckpoint {
    std::unique_ptr<Model> model;
    Vocab vocab;
    uint64_t seed = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace diffcap
