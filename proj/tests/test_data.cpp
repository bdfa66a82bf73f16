#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffcap/datagen.hpp"
#include "diffcap/image.hpp"
#include "diffcap/rng.hpp"
#include "diffcap/tokenizer.hpp"

using namespace diffcap;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("diffcap_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int visible_objects(const SceneSpec& s) { return s.visible_count(); }

}  // namespace

TEST_CASE("change types: exactly 12 stable names with round-trip parsing") {
    CHECK(all_change_types().size() == 12);
    const std::vector<std::string> expected = {"viewpoint",     "illumination", "addition",
                                               "disappearance", "removal",      "substitution",
                                               "size",          "color",        "orientation",
                                               "pose",          "ocr",          "counting"};
    for (size_t i = 0; i < expected.size(); ++i) {
        CHECK(change_type_name(all_change_types()[i]) == expected[i]);
        CHECK(change_type_from_name(expected[i]) == all_change_types()[i]);
    }
    CHECK_THROWS_AS(change_type_from_name("teleportation"), std::invalid_argument);
    CHECK(is_distractor_type(ChangeType::viewpoint));
    CHECK(is_distractor_type(ChangeType::illumination));
    CHECK_FALSE(is_distractor_type(ChangeType::addition));
}

TEST_CASE("generate_pair: addition menu adds exactly one object and says so") {
    GeneratorOptions opt;
    opt.image_size = 32;
    opt.menu = {ChangeType::addition};
    for (uint64_t seed = 0; seed < 25; ++seed) {
        const ChangePair p = generate_pair(seed, opt);
        CHECK(visible_objects(p.spec_b) == visible_objects(p.spec_a) + 1);
        CHECK(p.change_types == std::set<ChangeType>{ChangeType::addition});
        for (const std::string& cap : p.captions) {
            CHECK(cap.find("appeared") != std::string::npos);
            bool has_location = false;
            for (const char* loc : {"left", "right", "top", "bottom", "center"}) {
                if (cap.find(loc) != std::string::npos) has_location = true;
            }
            CHECK(has_location);
        }
    }
}

TEST_CASE("generate_pair: distractor jitter never enters the labels") {
    GeneratorOptions opt;
    opt.image_size = 32;
    opt.menu = {ChangeType::color};
    opt.distractors = true;
    for (uint64_t seed = 0; seed < 25; ++seed) {
        const ChangePair p = generate_pair(seed, opt);
        CHECK(p.change_types == std::set<ChangeType>{ChangeType::color});
        // The jitter lives outside the scene spec.
        CHECK(p.spec_a.brightness == p.spec_b.brightness);
        CHECK(p.jitter.brightness_mul != 1.0);
        // Global pixel difference: a corner pixel (background) changes too.
        CHECK(p.image_a.at(0, 0, 0) != p.image_b.at(0, 0, 0));
    }
}

TEST_CASE("generate_pair: pure-distractor menus cannot produce a pair") {
    GeneratorOptions opt;
    opt.menu = {ChangeType::viewpoint, ChangeType::illumination};
    CHECK_THROWS_AS((void)generate_pair(1, opt), GenerationError);
}

TEST_CASE("generate_pair is deterministic: re-rendering gives byte-identical images") {
    GeneratorOptions opt;
    opt.image_size = 32;
    opt.distractors = true;
    for (uint64_t seed = 0; seed < 1000; ++seed) {
        const ChangePair p1 = generate_pair(seed, opt);
        const ChangePair p2 = generate_pair(seed, opt);
        CHECK(encode_png(p1.image_a) == encode_png(p2.image_a));
        CHECK(encode_png(p1.image_b) == encode_png(p2.image_b));
        if (seed < 50) {
            CHECK(p1.captions == p2.captions);
            CHECK(p1.change_types == p2.change_types);
        }
    }
}

TEST_CASE("label soundness: declared types match the recomputed scene diff") {
    GeneratorOptions full;
    full.image_size = 32;
    GeneratorOptions with_jitter = full;
    with_jitter.distractors = true;
    GeneratorOptions narrow;
    narrow.image_size = 32;
    narrow.menu = {ChangeType::addition, ChangeType::removal, ChangeType::disappearance,
                   ChangeType::counting, ChangeType::substitution, ChangeType::size};
    for (const GeneratorOptions& opt : {full, with_jitter, narrow}) {
        for (uint64_t seed = 100; seed < 200; ++seed) {
            const ChangePair p = generate_pair(seed, opt);
            CHECK(diff_change_types(p.spec_a, p.spec_b) == p.change_types);
        }
    }
}

TEST_CASE("scene diff checker distinguishes the full change grammar") {
    SceneSpec a;
    a.objects.push_back({Shape::square, 0, false, 0, 0, true, 0, 0});
    a.objects.push_back({Shape::glyph, 2, true, 1, 5, true, 3, 2});
    a.brightness = 1.0;

    SUBCASE("color change") {
        SceneSpec b = a;
        b.objects[0].color = 3;
        CHECK(diff_change_types(a, b) == std::set<ChangeType>{ChangeType::color});
    }
    SUBCASE("size change") {
        SceneSpec b = a;
        b.objects[0].large = true;
        CHECK(diff_change_types(a, b) == std::set<ChangeType>{ChangeType::size});
    }
    SUBCASE("ocr and pose on the glyph") {
        SceneSpec b = a;
        b.objects[1].letter = 1;
        CHECK(diff_change_types(a, b) == std::set<ChangeType>{ChangeType::ocr});
        b = a;
        b.objects[1].pose = 0;
        CHECK(diff_change_types(a, b) == std::set<ChangeType>{ChangeType::pose});
    }
    SUBCASE("substitution wins when the shape differs") {
        SceneSpec b = a;
        b.objects[0].shape = Shape::circle;
        b.objects[0].color = 5;
        CHECK(diff_change_types(a, b) == std::set<ChangeType>{ChangeType::substitution});
    }
    SUBCASE("removal deletes, disappearance hides") {
        SceneSpec b = a;
        b.objects.erase(b.objects.begin());
        CHECK(diff_change_types(a, b) == std::set<ChangeType>{ChangeType::removal});
        SceneSpec c = a;
        c.objects[0].visible = false;
        CHECK(diff_change_types(a, c) == std::set<ChangeType>{ChangeType::disappearance});
    }
    SUBCASE("counting keeps at least one copy on each side") {
        SceneSpec b = a;
        SceneObject copy = a.objects[0];
        copy.cell = 9;
        b.objects.push_back(copy);
        CHECK(diff_change_types(a, b) == std::set<ChangeType>{ChangeType::counting});
    }
    SUBCASE("brightness and viewpoint changes") {
        SceneSpec b = a;
        b.brightness = 1.3;
        b.view_dx = 1;
        CHECK(diff_change_types(a, b) ==
              std::set<ChangeType>{ChangeType::illumination, ChangeType::viewpoint});
    }
    SUBCASE("identical scenes diff to nothing") { CHECK(diff_change_types(a, a).empty()); }
}

TEST_CASE("split sizes follow the rounding rule") {
    SplitSizes s100 = split_sizes(100);
    CHECK(s100.train == 80);
    CHECK(s100.val == 10);
    CHECK(s100.test == 10);
    // The corpus-scale case: round(0.8 n), round(0.1 n), remainder.
    SplitSizes big = split_sizes(15598);
    CHECK(big.train == 12478);
    CHECK(big.val == 1560);
    CHECK(big.test == 1560);
    CHECK(big.train + big.val + big.test == 15598);
    CHECK(std::fabs(big.train - 0.8 * 15598) <= 1.0);
    CHECK(std::fabs(big.val - 0.1 * 15598) <= 1.0);
    CHECK(std::fabs(big.test - 0.1 * 15598) <= 1.0);
}

TEST_CASE("build_corpus: manifest validates, splits cover the menu") {
    const fs::path dir = temp_dir("corpus_cov");
    BuildOptions opt;
    opt.n_pairs = 60;
    opt.seed = 9;
    opt.out_dir = dir.string();
    opt.gen.image_size = 32;
    opt.gen.menu = {ChangeType::addition, ChangeType::color, ChangeType::removal};
    const CorpusStats st = build_corpus(opt);
    CHECK(st.pairs == 60);
    CHECK(st.splits.train == 48);
    CHECK(st.splits.val == 6);
    CHECK(st.splits.test == 6);

    const ValidationReport rep = validate_corpus(dir.string());
    CHECK(rep.errors.empty());
    CHECK(rep.warnings.empty());  // every split covers every requested type
    fs::remove_all(dir);
}

TEST_CASE("build_corpus rejects tiny corpora and unwritable targets") {
    BuildOptions opt;
    opt.n_pairs = 5;
    opt.out_dir = (fs::temp_directory_path() / "x").string();
    CHECK_THROWS_AS((void)build_corpus(opt), std::invalid_argument);
    opt.n_pairs = 10;
    opt.out_dir = "/proc/definitely/not/writable";
    CHECK_THROWS((void)build_corpus(opt));
}

TEST_CASE("ingest_manifest: single record hand count") {
    const fs::path dir = temp_dir("ingest_one");
    {
        std::ofstream f(dir / "manifest.jsonl");
        f << R"({"id":"x1","image_a":"a.png","image_b":"b.png",)"
          << R"("captions":["a red square appeared."],"change_types":["addition"],)"
          << R"("split":"train","source":"external"})" << "\n";
    }
    const IngestResult res = ingest_manifest((dir / "manifest.jsonl").string());
    CHECK(res.errors.empty());
    CHECK(res.stats.pairs == 1);
    CHECK(res.stats.captions == 1);
    CHECK(res.stats.avg_words_per_caption == doctest::Approx(4.0).epsilon(1e-15));
    CHECK(res.stats.sentences_per_caption == doctest::Approx(1.0).epsilon(1e-15));
    fs::remove_all(dir);
}

TEST_CASE("ingest_manifest: line-numbered rejection of malformed records") {
    const fs::path dir = temp_dir("ingest_bad");
    {
        std::ofstream f(dir / "manifest.jsonl");
        f << "this is not json\n";
        f << R"({"id":"a","image_a":"a.png","image_b":"b.png","captions":["ok."],)"
          << R"("change_types":["addition"],"split":"train","source":"synthetic"})" << "\n";
        f << R"({"id":"b","image_a":"a.png","image_b":"b.png","captions":[],)"
          << R"("change_types":["addition"],"split":"train","source":"synthetic"})" << "\n";
        f << R"({"id":"c","image_a":"a.png","image_b":"b.png","captions":["x."],)"
          << R"("change_types":["warp"],"split":"train","source":"synthetic"})" << "\n";
        f << R"({"id":"d","image_a":"a.png","image_b":"b.png","captions":["x."],)"
          << R"("change_types":["viewpoint"],"split":"train","source":"synthetic"})" << "\n";
        f << R"({"id":"e","image_a":"a.png","image_b":"b.png","captions":["x."],)"
          << R"("change_types":["addition"],"split":"half","source":"synthetic"})" << "\n";
        f << R"({"id":"f","image_b":"b.png","captions":["x."],)"
          << R"("change_types":["addition"],"split":"train","source":"synthetic"})" << "\n";
    }
    const IngestResult res = ingest_manifest((dir / "manifest.jsonl").string());
    CHECK(res.records.size() == 1);
    REQUIRE(res.errors.size() == 6);
    CHECK(res.errors[0].find("line 1") != std::string::npos);
    CHECK(res.errors[0].find("malformed JSON") != std::string::npos);
    CHECK(res.errors[1].find("line 3") != std::string::npos);
    CHECK(res.errors[1].find("captions") != std::string::npos);
    CHECK(res.errors[2].find("line 4") != std::string::npos);
    CHECK(res.errors[2].find("warp") != std::string::npos);
    CHECK(res.errors[3].find("line 5") != std::string::npos);
    CHECK(res.errors[3].find("distractor") != std::string::npos);
    CHECK(res.errors[4].find("line 6") != std::string::npos);
    CHECK(res.errors[5].find("line 7") != std::string::npos);
    CHECK(res.errors[5].find("missing") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("validator flags image files shared across splits") {
    const fs::path dir = temp_dir("disjoint");
    fs::create_directories(dir / "images");
    const ChangePair p = generate_pair(1, GeneratorOptions{});
    write_png((dir / "images" / "x_a.png").string(), p.image_a);
    write_png((dir / "images" / "x_b.png").string(), p.image_b);
    {
        std::ofstream f(dir / "manifest.jsonl");
        f << R"({"id":"r1","image_a":"images/x_a.png","image_b":"images/x_b.png",)"
          << R"("captions":["a."],"change_types":["addition"],"split":"train","source":"synthetic"})"
          << "\n";
        f << R"({"id":"r2","image_a":"images/x_a.png","image_b":"images/x_b.png",)"
          << R"("captions":["b."],"change_types":["addition"],"split":"test","source":"synthetic"})"
          << "\n";
    }
    const ValidationReport rep = validate_corpus(dir.string());
    bool flagged = false;
    for (const std::string& e : rep.errors) {
        if (e.find("referenced by splits") != std::string::npos) flagged = true;
    }
    CHECK(flagged);
    fs::remove_all(dir);
}

TEST_CASE("corpus stats match an independent recount; QA expansion covers captions") {
    const fs::path dir = temp_dir("corpus_stats");
    BuildOptions opt;
    opt.n_pairs = 100;
    opt.seed = 4;
    opt.out_dir = dir.string();
    opt.gen.image_size = 32;
    const CorpusStats st = build_corpus(opt);

    // Recount from the manifest text, line by line.
    std::ifstream f(dir / "manifest.jsonl");
    std::string line;
    long captions = 0, words = 0, sentences = 0;
    std::set<std::string> vocab;
    long qa_expected = 0;
    while (std::getline(f, line)) {
        const auto cap_start = [&](size_t from) { return line.find('"', from); };
        // Cheap field scan: parse captions array textually.
        const size_t arr = line.find("\"captions\":[");
        REQUIRE(arr != std::string::npos);
        size_t pos = arr + 12;
        while (line[pos] != ']') {
            REQUIRE(line[pos] == '"');
            size_t end = pos + 1;
            while (line[end] != '"') end += line[end] == '\\' ? 2 : 1;
            const std::string cap = line.substr(pos + 1, end - pos - 1);
            ++captions;
            ++qa_expected;
            std::istringstream iss(cap);
            std::string tok;
            while (iss >> tok) {
                ++words;
                for (char& ch : tok) ch = static_cast<char>(std::tolower((unsigned char)ch));
                vocab.insert(tok);
            }
            for (char ch : cap) {
                if (ch == '.' || ch == '?' || ch == '!') ++sentences;
            }
            pos = end + 1;
            if (line[pos] == ',') ++pos;
        }
        (void)cap_start;
    }
    CHECK(st.captions == captions);
    CHECK(st.avg_words_per_caption ==
          doctest::Approx(static_cast<double>(words) / captions).epsilon(1e-12));
    CHECK(st.sentences_per_caption ==
          doctest::Approx(static_cast<double>(sentences) / captions).epsilon(1e-12));
    CHECK(st.vocabulary == static_cast<int>(vocab.size()));

    // One QA sample per caption.
    const IngestResult ing = ingest_manifest((dir / "manifest.jsonl").string());
    long qa_total = 0;
    for (const ManifestRecord& rec : ing.records) {
        qa_total += static_cast<long>(to_qa(rec, 0).size());
    }
    CHECK(qa_total == qa_expected);
    CHECK_THROWS_AS((void)qa_template(99), std::invalid_argument);

    // A pair with two captions yields exactly two QA samples.
    bool saw_two = false;
    for (const ManifestRecord& rec : ing.records) {
        if (rec.captions.size() == 2) {
            CHECK(to_qa(rec, 1).size() == 2);
            CHECK(to_qa(rec, 1)[0].answer == rec.captions[0]);
            CHECK(to_qa(rec, 1)[1].answer == rec.captions[1]);
            saw_two = true;
            break;
        }
    }
    CHECK(saw_two);
    fs::remove_all(dir);
}

TEST_CASE("tokenizer: punctuation splitting, round trip, oov rate") {
    CHECK(tokenize_text("A red square.") ==
          std::vector<std::string>{"a", "red", "square", "."});
    CHECK(detokenize_text({"a", "red", "square", "."}) == "a red square.");

    // Round-trip identity over generated captions (canonical lowercase text).
    GeneratorOptions opt;
    opt.image_size = 32;
    std::vector<std::string> captions;
    for (uint64_t seed = 0; captions.size() < 1000; ++seed) {
        const ChangePair p = generate_pair(seed, opt);
        for (const std::string& c : p.captions) captions.push_back(c);
    }
    const Vocab vocab = Vocab::build(captions);
    for (const std::string& c : captions) {
        CHECK(vocab.decode(vocab.encode(c)) == c);
    }

    // Vocabulary from one slice of pairs, applied to held-out pairs.
    std::vector<std::string> train_caps(captions.begin(), captions.begin() + 800);
    const Vocab train_vocab = Vocab::build(train_caps);
    long unk = 0, total = 0;
    for (size_t i = 800; i < captions.size(); ++i) {
        for (int id : train_vocab.encode(captions[i])) {
            ++total;
            unk += id == tokens::kUnk ? 1 : 0;
        }
    }
    CHECK(static_cast<double>(unk) / total < 0.05);
}

TEST_CASE("png round trip preserves quantized pixels") {
    Image img(24, 24);
    Rng rng(3);
    for (double& v : img.pixels) v = rng.uniform();
    const Image back = decode_png(encode_png(img));
    REQUIRE(back.width == 24);
    for (size_t i = 0; i < img.pixels.size(); ++i) {
        const double quantized = std::lround(img.pixels[i] * 255.0) / 255.0;
        CHECK(back.pixels[i] == doctest::Approx(quantized).epsilon(1e-9));
    }
}

TEST_CASE("load_corpus filters by split and decodes images") {
    const fs::path dir = temp_dir("load_corpus");
    BuildOptions opt;
    opt.n_pairs = 12;
    opt.seed = 2;
    opt.out_dir = dir.string();
    opt.gen.image_size = 32;
    build_corpus(opt);
    const auto train = load_corpus(dir.string(), "train");
    const auto all = load_corpus(dir.string());
    CHECK(train.size() == 10);
    CHECK(all.size() == 12);
    CHECK(train[0].image_a.width == 32);
    fs::remove_all(dir);
}
