#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "diffcap/image.hpp"
#include "diffcap/scene.hpp"

namespace diffcap {

struct GenerationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ChangeRecord {
    ChangeType type;
    SceneObject before;  // added object itself for additions
    SceneObject after;
    int count_before = 0;  // counting only
    int count_after = 0;
};

struct ChangePair {
    std::string id;
    SceneSpec spec_a, spec_b;
    DistractorJitter jitter;
    std::vector<ChangeRecord> records;
    std::set<ChangeType> change_types;
    std::vector<std::string> captions;  // each: referring part + change part per sentence
    std::string split = "train";
    std::string source = "synthetic";
    std::string image_a_path, image_b_path;  // set once materialized on disk
    Image image_a, image_b;
};

struct GeneratorOptions {
    int image_size = 64;
    std::vector<ChangeType> menu;  // defaults to all 12 types
    bool distractors = false;
    int fixed_captions = 0;  // 0: one or two per pair, sampled; otherwise exactly this many

    GeneratorOptions();
};

// Deterministic in (seed, options): same arguments, byte-identical images.
ChangePair generate_pair(uint64_t seed, const GeneratorOptions& opt);

// ---- corpus on disk -------------------------------------------------------

struct SplitSizes {
    int train = 0, val = 0, test = 0;
};

// round(0.8 n) / round(0.1 n) / remainder; each within 1 of the exact ratio.
SplitSizes split_sizes(int n_pairs, double train_frac = 0.8, double val_frac = 0.1);

struct CorpusStats {
    int pairs = 0;
    int captions = 0;
    double avg_words_per_caption = 0.0;
    double sentences_per_caption = 0.0;
    int vocabulary = 0;  // distinct lowercased whitespace tokens
    SplitSizes splits;
};

struct BuildOptions {
    int n_pairs = 100;
    uint64_t seed = 1;
    std::string out_dir;
    GeneratorOptions gen;
    double train_frac = 0.8;
    double val_frac = 0.1;
};

CorpusStats build_corpus(const BuildOptions& opt);

// ---- manifest I/O -----------------------------------------------------------

struct ManifestRecord {
    std::string id;
    std::string image_a, image_b;
    std::vector<std::string> captions;
    std::vector<std::string> change_types;
    std::string split;
    std::string source;
};

struct IngestResult {
    std::vector<ManifestRecord> records;          // valid records only
    std::vector<std::string> errors;              // "line N: ..." for rejected ones
    CorpusStats stats;
};

IngestResult ingest_manifest(const std::string& manifest_path);

std::string manifest_record_to_json(const ManifestRecord& rec);

CorpusStats compute_stats(const std::vector<ManifestRecord>& records);

// Full directory check: manifest validity, image files, split disjointness,
// optional label audit against the scenes sidecar.
struct ValidationReport {
    std::vector<std::string> errors;
    std::vector<std::string> warnings;
    CorpusStats stats;
    bool ok() const { return errors.empty(); }
};

ValidationReport validate_corpus(const std::string& dir);

// ---- question-answer formatting --------------------------------------------

struct QaSample {
    std::string question;
    std::string answer;
    std::string pair_id;
};

int qa_template_count();
const std::string& qa_template(int template_id);  // throws on unknown id
std::vector<QaSample> to_qa(const ManifestRecord& pair, int template_id);

// Loaded training example backed by decoded images.
struct LoadedPair {
    ManifestRecord record;
    Image image_a, image_b;
};

std::vector<LoadedPair> load_corpus(const std::string& dir, const std::string& split = "");

}  // namespace diffcap
