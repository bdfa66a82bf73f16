#include "diffcap/datagen.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <tuple>

#include "diffcap/rng.hpp"
#include "json.hpp"

namespace diffcap {

namespace fs = std::filesystem;
using nlohmann::json;

GeneratorOptions::GeneratorOptions() {
    menu.assign(all_change_types().begin(), all_change_types().end());
}

namespace {

using ClassKey = std::tuple<int, int, int, int, int, int>;

ClassKey class_key(const SceneObject& o) {
    return {static_cast<int>(o.shape), o.color, o.large ? 1 : 0, o.orientation, o.letter, o.pose};
}

int visible_class_count(const SceneSpec& s, const ClassKey& k) {
    int n = 0;
    for (const SceneObject& o : s.objects) {
        if (o.visible && class_key(o) == k) ++n;
    }
    return n;
}

struct ApplyCtx {
    const SceneSpec& a;
    SceneSpec& b;
    Rng& rng;
    std::set<int> used_cells;
    std::set<ClassKey> reserved;
};

std::vector<int> free_cells(const ApplyCtx& ctx) {
    std::vector<int> out;
    for (int c = 0; c < kCellCount; ++c) {
        bool occupied = ctx.used_cells.count(c) > 0;
        for (const SceneObject& o : ctx.b.objects) {
            if (o.cell == c) occupied = true;
        }
        if (!occupied) out.push_back(c);
    }
    return out;
}

std::vector<SceneObject*> candidate_objects(ApplyCtx& ctx) {
    std::vector<SceneObject*> out;
    for (SceneObject& o : ctx.b.objects) {
        if (o.visible && !ctx.used_cells.count(o.cell) && !ctx.reserved.count(class_key(o))) {
            out.push_back(&o);
        }
    }
    return out;
}

SceneObject sample_object(Rng& rng, int cell) {
    SceneObject o;
    o.shape = static_cast<Shape>(rng.below(4));
    o.color = rng.below(kColorCount);
    o.large = rng.below(2) == 1;
    o.cell = cell;
    if (o.shape == Shape::triangle || o.shape == Shape::glyph) o.orientation = rng.below(4);
    if (o.shape == Shape::glyph) {
        o.letter = rng.below(kLetterCount);
        o.pose = rng.below(4);
    }
    return o;
}

SceneSpec sample_scene(Rng& rng) {
    SceneSpec s;
    const int n = 2 + rng.below(7);  // 2..8 objects
    std::vector<int> cells(kCellCount);
    for (int i = 0; i < kCellCount; ++i) cells[i] = i;
    for (int i = kCellCount - 1; i > 0; --i) std::swap(cells[i], cells[rng.below(i + 1)]);
    for (int i = 0; i < n; ++i) s.objects.push_back(sample_object(rng, cells[i]));
    std::sort(s.objects.begin(), s.objects.end(),
              [](const SceneObject& x, const SceneObject& y) { return x.cell < y.cell; });
    s.brightness = rng.uniform(0.85, 1.15);
    return s;
}

bool class_is_fresh(const ApplyCtx& ctx, const ClassKey& k) {
    return !ctx.reserved.count(k) && visible_class_count(ctx.a, k) == 0 &&
           visible_class_count(ctx.b, k) == 0;
}

bool apply_addition(ApplyCtx& ctx, ChangeRecord& rec) {
    auto cells = free_cells(ctx);
    if (cells.empty()) return false;
    const int cell = cells[ctx.rng.below(static_cast<int>(cells.size()))];
    for (int attempt = 0; attempt < 32; ++attempt) {
        SceneObject obj = sample_object(ctx.rng, cell);
        if (!class_is_fresh(ctx, class_key(obj))) continue;
        ctx.b.objects.push_back(obj);
        ctx.used_cells.insert(cell);
        ctx.reserved.insert(class_key(obj));
        rec = {ChangeType::addition, obj, obj, 0, 1};
        return true;
    }
    return false;
}

bool apply_vanish(ApplyCtx& ctx, ChangeRecord& rec, bool keep_hidden) {
    std::vector<SceneObject*> singles;
    for (SceneObject* o : candidate_objects(ctx)) {
        const ClassKey k = class_key(*o);
        if (visible_class_count(ctx.a, k) == 1 && visible_class_count(ctx.b, k) == 1) {
            singles.push_back(o);
        }
    }
    if (singles.empty()) return false;
    SceneObject* target = singles[ctx.rng.below(static_cast<int>(singles.size()))];
    const SceneObject before = *target;
    ctx.used_cells.insert(target->cell);
    ctx.reserved.insert(class_key(before));
    if (keep_hidden) {
        target->visible = false;
    } else {
        ctx.b.objects.erase(ctx.b.objects.begin() + (target - ctx.b.objects.data()));
    }
    rec = {keep_hidden ? ChangeType::disappearance : ChangeType::removal, before, before, 1, 0};
    return true;
}

bool apply_substitution(ApplyCtx& ctx, ChangeRecord& rec) {
    auto cands = candidate_objects(ctx);
    if (cands.empty()) return false;
    SceneObject* target = cands[ctx.rng.below(static_cast<int>(cands.size()))];
    const SceneObject before = *target;
    for (int attempt = 0; attempt < 32; ++attempt) {
        SceneObject repl = sample_object(ctx.rng, before.cell);
        if (repl.shape == before.shape) continue;
        if (ctx.reserved.count(class_key(repl))) continue;
        ctx.used_cells.insert(before.cell);
        ctx.reserved.insert(class_key(before));
        ctx.reserved.insert(class_key(repl));
        *target = repl;
        rec = {ChangeType::substitution, before, repl, 0, 0};
        return true;
    }
    return false;
}

bool apply_attr(ApplyCtx& ctx, ChangeType type, ChangeRecord& rec) {
    std::vector<SceneObject*> cands;
    for (SceneObject* o : candidate_objects(ctx)) {
        switch (type) {
            case ChangeType::orientation:
                if (o->shape == Shape::triangle || o->shape == Shape::glyph) cands.push_back(o);
                break;
            case ChangeType::pose:
            case ChangeType::ocr:
                if (o->shape == Shape::glyph) cands.push_back(o);
                break;
            default:
                cands.push_back(o);
        }
    }
    if (cands.empty()) return false;
    SceneObject* target = cands[ctx.rng.below(static_cast<int>(cands.size()))];
    const SceneObject before = *target;
    for (int attempt = 0; attempt < 32; ++attempt) {
        SceneObject after = before;
        switch (type) {
            case ChangeType::color: after.color = ctx.rng.below(kColorCount); break;
            case ChangeType::size: after.large = !after.large; break;
            case ChangeType::orientation: after.orientation = ctx.rng.below(4); break;
            case ChangeType::pose: after.pose = ctx.rng.below(4); break;
            case ChangeType::ocr: after.letter = ctx.rng.below(kLetterCount); break;
            default: return false;
        }
        if (class_key(after) == class_key(before)) continue;
        if (ctx.reserved.count(class_key(after))) continue;
        ctx.used_cells.insert(before.cell);
        ctx.reserved.insert(class_key(before));
        ctx.reserved.insert(class_key(after));
        *target = after;
        rec = {type, before, after, 0, 0};
        return true;
    }
    return false;
}

bool apply_counting(ApplyCtx& ctx, ChangeRecord& rec) {
    // Group untouched visible classes and their members.
    std::map<ClassKey, std::vector<SceneObject*>> groups;
    for (SceneObject* o : candidate_objects(ctx)) groups[class_key(*o)].push_back(o);
    std::vector<ClassKey> keys;
    for (auto& [k, members] : groups) {
        if (visible_class_count(ctx.b, k) == static_cast<int>(members.size()) &&
            visible_class_count(ctx.a, k) == static_cast<int>(members.size())) {
            keys.push_back(k);
        }
    }
    if (keys.empty()) return false;
    const ClassKey k = keys[ctx.rng.below(static_cast<int>(keys.size()))];
    auto& members = groups[k];
    const int n = static_cast<int>(members.size());
    auto cells = free_cells(ctx);
    const bool can_add = !cells.empty();
    const bool can_remove = n >= 2;
    if (!can_add && !can_remove) return false;
    const bool add = can_add && (!can_remove || ctx.rng.below(2) == 1);

    const SceneObject prototype = *members[0];
    for (SceneObject* o : members) ctx.used_cells.insert(o->cell);
    ctx.reserved.insert(k);

    int after = n;
    if (add) {
        const int extra = 1 + ctx.rng.below(std::min<int>(2, static_cast<int>(cells.size())));
        for (int i = 0; i < extra; ++i) {
            const int idx = ctx.rng.below(static_cast<int>(cells.size()));
            SceneObject clone = prototype;
            clone.cell = cells[idx];
            cells.erase(cells.begin() + idx);
            ctx.b.objects.push_back(clone);
            ctx.used_cells.insert(clone.cell);
        }
        after = n + extra;
    } else {
        const int drop = 1 + ctx.rng.below(n - 1);
        std::set<int> drop_cells;
        for (int i = 0; i < drop; ++i) {
            drop_cells.insert(members.back()->cell);
            members.pop_back();
        }
        std::erase_if(ctx.b.objects,
                      [&](const SceneObject& o) { return drop_cells.count(o.cell) > 0; });
        after = n - drop;
    }
    std::sort(ctx.b.objects.begin(), ctx.b.objects.end(),
              [](const SceneObject& x, const SceneObject& y) { return x.cell < y.cell; });
    rec = {ChangeType::counting, prototype, prototype, n, after};
    return true;
}

bool apply_viewpoint(ApplyCtx& ctx, ChangeRecord& rec) {
    for (int attempt = 0; attempt < 16; ++attempt) {
        const int dx = ctx.rng.below(5) - 2;
        const int dy = ctx.rng.below(5) - 2;
        if (dx == 0 && dy == 0) continue;
        ctx.b.view_dx = dx;
        ctx.b.view_dy = dy;
        rec = {ChangeType::viewpoint, {}, {}, 0, 0};
        rec.count_before = dx;  // reused to carry the shift for captioning
        rec.count_after = dy;
        return true;
    }
    return false;
}

bool apply_illumination(ApplyCtx& ctx, ChangeRecord& rec) {
    for (int attempt = 0; attempt < 32; ++attempt) {
        const double target = ctx.rng.uniform(0.5, 1.5);
        if (std::fabs(target - ctx.a.brightness) < 0.2) continue;
        ctx.b.brightness = target;
        rec = {ChangeType::illumination, {}, {}, 0, 0};
        rec.count_before = target > ctx.a.brightness ? 1 : 0;
        return true;
    }
    return false;
}

bool apply_change(ApplyCtx& ctx, ChangeType type, ChangeRecord& rec) {
    switch (type) {
        case ChangeType::addition: return apply_addition(ctx, rec);
        case ChangeType::disappearance: return apply_vanish(ctx, rec, true);
        case ChangeType::removal: return apply_vanish(ctx, rec, false);
        case ChangeType::substitution: return apply_substitution(ctx, rec);
        case ChangeType::color:
        case ChangeType::size:
        case ChangeType::orientation:
        case ChangeType::pose:
        case ChangeType::ocr: return apply_attr(ctx, type, rec);
        case ChangeType::counting: return apply_counting(ctx, rec);
        case ChangeType::viewpoint: return apply_viewpoint(ctx, rec);
        case ChangeType::illumination: return apply_illumination(ctx, rec);
    }
    return false;
}

// ---- captions ---------------------------------------------------------------

std::string referring_phrase(const SceneObject& obj, bool definite) {
    return object_phrase(obj, definite) + " in the " + location_phrase(obj.cell);
}

std::string caption_sentence(const ChangeRecord& rec, int variant) {
    const SceneObject& o = rec.before;
    switch (rec.type) {
        case ChangeType::addition: {
            static const char* forms[3] = {"appeared in the scene", "appeared there",
                                           "has appeared"};
            return referring_phrase(rec.after, false) + ", " + forms[variant] + ".";
        }
        case ChangeType::disappearance: {
            static const char* forms[3] = {"disappeared from the scene", "is no longer visible",
                                           "has vanished"};
            return referring_phrase(o, true) + ", " + forms[variant] + ".";
        }
        case ChangeType::removal: {
            static const char* forms[3] = {"was removed from the scene", "was taken away",
                                           "got removed"};
            return referring_phrase(o, true) + ", " + forms[variant] + ".";
        }
        case ChangeType::substitution: {
            static const char* forms[3] = {"was replaced by", "was swapped for", "became"};
            return referring_phrase(o, true) + ", " + forms[variant] + " " +
                   object_phrase(rec.after, false) + ".";
        }
        case ChangeType::size: {
            const std::string from = o.large ? "large" : "small";
            const std::string to = rec.after.large ? "large" : "small";
            static const char* forms[3] = {"changed in size from", "was resized from", "grew from"};
            return referring_phrase(o, true) + ", " + forms[variant] + " " + from + " to " + to + ".";
        }
        case ChangeType::color: {
            static const char* forms[3] = {"changed color from", "was recolored from",
                                           "turned from"};
            return referring_phrase(o, true) + ", " + forms[variant] + " " + color_name(o.color) +
                   " to " + color_name(rec.after.color) + ".";
        }
        case ChangeType::orientation: {
            static const char* forms[3] = {"rotated from pointing", "changed orientation from",
                                           "turned from facing"};
            return referring_phrase(o, true) + ", " + forms[variant] + " " +
                   orientation_name(o.orientation) + " to " + orientation_name(rec.after.orientation) +
                   ".";
        }
        case ChangeType::pose: {
            static const char* forms[3] = {"changed pose with its arm now pointing",
                                           "moved its arm to point",
                                           "shifted its arm toward the"};
            return referring_phrase(o, true) + ", " + forms[variant] + " " +
                   pose_name(rec.after.pose) + ".";
        }
        case ChangeType::ocr: {
            const std::string from(1, glyph_letter(o.letter));
            const std::string to(1, glyph_letter(rec.after.letter));
            static const char* forms[3] = {"changed its letter from", "had its text changed from",
                                           "now reads"};
            if (variant == 2) {
                return referring_phrase(o, true) + ", now reads " + to + " instead of " + from + ".";
            }
            return referring_phrase(o, true) + ", " + forms[variant] + " " + from + " to " + to + ".";
        }
        case ChangeType::counting: {
            const std::string noun = object_phrase(o, false).substr(2);  // drop "a "
            static const char* forms[3] = {"changed in number from", "went from",
                                           "changed count from"};
            return "the group of " + noun + " objects across the scene, " + forms[variant] + " " +
                   std::to_string(rec.count_before) + " to " + std::to_string(rec.count_after) + ".";
        }
        case ChangeType::viewpoint: {
            static const char* forms[3] = {"shifted slightly", "moved a little", "drifted"};
            std::vector<std::string> parts;
            if (rec.count_before > 0) parts.push_back("to the right");
            else if (rec.count_before < 0) parts.push_back("to the left");
            if (rec.count_after > 0) parts.push_back("downward");
            else if (rec.count_after < 0) parts.push_back("upward");
            std::string dir;
            for (size_t k = 0; k < parts.size(); ++k) dir += (k ? " and " : " ") + parts[k];
            return std::string("the camera viewpoint, ") + forms[variant] + dir + ".";
        }
        case ChangeType::illumination: {
            const bool brighter = rec.count_before == 1;
            static const char* forms[3] = {"became noticeably", "turned", "got"};
            return std::string("the overall lighting of the scene, ") + forms[variant] + " " +
                   (brighter ? "brighter" : "darker") + ".";
        }
    }
    return "";
}

}  // namespace

ChangePair generate_pair(uint64_t seed, const GeneratorOptions& opt) {
    if (opt.menu.empty()) throw std::invalid_argument("generate_pair: empty change menu");
    std::vector<ChangeType> menu = opt.menu;
    std::sort(menu.begin(), menu.end());
    menu.erase(std::unique(menu.begin(), menu.end()), menu.end());
    std::vector<ChangeType> semantic;
    for (ChangeType t : menu) {
        if (!is_distractor_type(t)) semantic.push_back(t);
    }
    if (semantic.empty()) {
        throw GenerationError("generate_pair: menu has only distractor types, no semantic change possible");
    }

    Rng rng(mix_seed(seed, 0xD1FFCA9ULL));
    for (int attempt = 0; attempt < 64; ++attempt) {
        SceneSpec scene_a = sample_scene(rng);
        SceneSpec scene_b = scene_a;

        const int max_types = std::min<int>(3, static_cast<int>(menu.size()));
        const int n_changes = 1 + rng.below(max_types);
        std::vector<ChangeType> picked;
        picked.push_back(semantic[rng.below(static_cast<int>(semantic.size()))]);
        std::vector<ChangeType> rest;
        for (ChangeType t : menu) {
            if (t != picked[0]) rest.push_back(t);
        }
        for (int i = static_cast<int>(rest.size()) - 1; i > 0; --i) {
            std::swap(rest[i], rest[rng.below(i + 1)]);
        }
        for (int i = 0; i < n_changes - 1 && i < static_cast<int>(rest.size()); ++i) {
            picked.push_back(rest[i]);
        }

        ApplyCtx ctx{scene_a, scene_b, rng, {}, {}};
        std::vector<ChangeRecord> records;
        bool ok = true;
        for (ChangeType t : picked) {
            ChangeRecord rec;
            if (!apply_change(ctx, t, rec)) {
                ok = false;
                break;
            }
            records.push_back(rec);
        }
        if (!ok) continue;

        ChangePair pair;
        pair.id = "pair-" + std::to_string(seed);
        pair.spec_a = scene_a;
        pair.spec_b = scene_b;
        pair.records = records;
        for (const ChangeRecord& r : records) pair.change_types.insert(r.type);

        if (opt.distractors) {
            const double mag = rng.uniform(0.05, 0.12);
            double mul = rng.below(2) == 1 ? 1.0 + mag : 1.0 - mag;
            if (scene_b.brightness * mul > 1.55 || scene_b.brightness * mul < 0.45) {
                mul = 2.0 - mul;
            }
            pair.jitter.brightness_mul = mul;
            pair.jitter.dx = rng.below(5) - 2;
            pair.jitter.dy = rng.below(5) - 2;
        }

        const int n_captions = opt.fixed_captions > 0 ? opt.fixed_captions : 1 + rng.below(2);
        for (int c = 0; c < n_captions; ++c) {
            std::string caption;
            for (size_t r = 0; r < records.size(); ++r) {
                if (r > 0) caption += " ";
                caption += caption_sentence(records[r], rng.below(3));
            }
            pair.captions.push_back(caption);
        }

        pair.image_a = render_scene(scene_a, DistractorJitter{}, opt.image_size);
        pair.image_b = render_scene(scene_b, pair.jitter, opt.image_size);
        return pair;
    }
    throw GenerationError("generate_pair: no feasible scene after 64 attempts");
}

SplitSizes split_sizes(int n_pairs, double train_frac, double val_frac) {
    SplitSizes s;
    s.train = static_cast<int>(std::lround(train_frac * n_pairs));
    s.val = static_cast<int>(std::lround(val_frac * n_pairs));
    s.test = n_pairs - s.train - s.val;
    if (s.test < 0) throw std::invalid_argument("split_sizes: fractions exceed 1");
    return s;
}

namespace {

json object_to_json(const SceneObject& o) {
    return json{{"shape", shape_name(o.shape)}, {"color", o.color},   {"large", o.large},
                {"orientation", o.orientation}, {"cell", o.cell},     {"visible", o.visible},
                {"letter", o.letter},           {"pose", o.pose}};
}

SceneObject object_from_json(const json& j) {
    SceneObject o;
    const std::string shape = j.at("shape").get<std::string>();
    for (int s = 0; s < 4; ++s) {
        if (shape_name(static_cast<Shape>(s)) == shape) o.shape = static_cast<Shape>(s);
    }
    o.color = j.at("color").get<int>();
    o.large = j.at("large").get<bool>();
    o.orientation = j.at("orientation").get<int>();
    o.cell = j.at("cell").get<int>();
    o.visible = j.at("visible").get<bool>();
    o.letter = j.at("letter").get<int>();
    o.pose = j.at("pose").get<int>();
    return o;
}

json spec_to_json(const SceneSpec& s) {
    json objs = json::array();
    for (const SceneObject& o : s.objects) objs.push_back(object_to_json(o));
    return json{{"objects", objs},
                {"brightness", s.brightness},
                {"view_dx", s.view_dx},
                {"view_dy", s.view_dy}};
}

SceneSpec spec_from_json(const json& j) {
    SceneSpec s;
    for (const json& jo : j.at("objects")) s.objects.push_back(object_from_json(jo));
    s.brightness = j.at("brightness").get<double>();
    s.view_dx = j.at("view_dx").get<int>();
    s.view_dy = j.at("view_dy").get<int>();
    return s;
}

}  // namespace

std::string manifest_record_to_json(const ManifestRecord& rec) {
    json j{{"id", rec.id},
           {"image_a", rec.image_a},
           {"image_b", rec.image_b},
           {"captions", rec.captions},
           {"change_types", rec.change_types},
           {"split", rec.split},
           {"source", rec.source}};
    return j.dump();
}

CorpusStats compute_stats(const std::vector<ManifestRecord>& records) {
    CorpusStats st;
    st.pairs = static_cast<int>(records.size());
    long words = 0;
    long sentences = 0;
    std::set<std::string> vocab;
    for (const ManifestRecord& r : records) {
        if (r.split == "train") st.splits.train++;
        else if (r.split == "val") st.splits.val++;
        else st.splits.test++;
        for (const std::string& cap : r.captions) {
            st.captions++;
            std::istringstream iss(cap);
            std::string tok;
            while (iss >> tok) {
                ++words;
                std::string low;
                for (char c : tok) low.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
                vocab.insert(low);
            }
            int terms = 0;
            size_t last_term = std::string::npos;
            for (size_t i = 0; i < cap.size(); ++i) {
                if (cap[i] == '.' || cap[i] == '!' || cap[i] == '?') {
                    ++terms;
                    last_term = i;
                }
            }
            bool trailing = false;
            const size_t start = last_term == std::string::npos ? 0 : last_term + 1;
            for (size_t i = start; i < cap.size(); ++i) {
                if (!std::isspace(static_cast<unsigned char>(cap[i]))) trailing = true;
            }
            sentences += terms + (trailing ? 1 : 0);
        }
    }
    if (st.captions > 0) {
        st.avg_words_per_caption = static_cast<double>(words) / st.captions;
        st.sentences_per_caption = static_cast<double>(sentences) / st.captions;
    }
    st.vocabulary = static_cast<int>(vocab.size());
    return st;
}

IngestResult ingest_manifest(const std::string& manifest_path) {
    std::ifstream f(manifest_path);
    if (!f) throw std::runtime_error("ingest_manifest: cannot open " + manifest_path);
    IngestResult out;
    std::set<std::string> seen_ids;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::string where = "line " + std::to_string(line_no) + ": ";
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            out.errors.push_back(where + "malformed JSON (" + e.what() + ")");
            continue;
        }
        ManifestRecord rec;
        try {
            rec.id = j.at("id").get<std::string>();
            rec.image_a = j.at("image_a").get<std::string>();
            rec.image_b = j.at("image_b").get<std::string>();
            rec.captions = j.at("captions").get<std::vector<std::string>>();
            rec.change_types = j.at("change_types").get<std::vector<std::string>>();
            rec.split = j.at("split").get<std::string>();
            rec.source = j.value("source", "external");
        } catch (const json::exception& e) {
            out.errors.push_back(where + "missing or mistyped field (" + e.what() + ")");
            continue;
        }
        std::string problem;
        if (rec.id.empty()) problem = "empty id";
        if (problem.empty() && seen_ids.count(rec.id)) problem = "duplicate id " + rec.id;
        if (problem.empty() && rec.captions.empty()) problem = "no captions";
        for (const std::string& c : rec.captions) {
            if (problem.empty() && c.empty()) problem = "empty caption";
        }
        if (problem.empty() && rec.change_types.empty()) problem = "no change types";
        bool any_semantic = false;
        for (const std::string& t : rec.change_types) {
            if (!problem.empty()) break;
            try {
                if (!is_distractor_type(change_type_from_name(t))) any_semantic = true;
            } catch (const std::invalid_argument&) {
                problem = "unknown change type '" + t + "'";
            }
        }
        if (problem.empty() && !any_semantic) {
            problem = "change_types contain only distractor types";
        }
        if (problem.empty() && rec.split != "train" && rec.split != "val" && rec.split != "test") {
            problem = "bad split '" + rec.split + "'";
        }
        if (problem.empty() && rec.source != "synthetic" && rec.source != "external") {
            problem = "bad source '" + rec.source + "'";
        }
        if (!problem.empty()) {
            out.errors.push_back(where + problem);
            continue;
        }
        seen_ids.insert(rec.id);
        out.records.push_back(std::move(rec));
    }
    out.stats = compute_stats(out.records);
    return out;
}

CorpusStats build_corpus(const BuildOptions& opt) {
    if (opt.n_pairs < 10) throw std::invalid_argument("build_corpus: need at least 10 pairs");
    if (opt.out_dir.empty()) throw std::invalid_argument("build_corpus: empty output directory");
    fs::create_directories(fs::path(opt.out_dir) / "images");

    struct Built {
        ChangePair pair;
        int split = 0;  // 0 train, 1 val, 2 test
    };
    std::vector<Built> built;
    built.reserve(opt.n_pairs);
    for (int i = 0; i < opt.n_pairs; ++i) {
        GeneratorOptions gen = opt.gen;
        ChangePair p = generate_pair(mix_seed(opt.seed, static_cast<uint64_t>(i)), gen);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "p%06d", i);
        p.id = buf;
        built.push_back({std::move(p), 0});
    }

    const SplitSizes sizes = split_sizes(opt.n_pairs, opt.train_frac, opt.val_frac);
    std::vector<int> order(opt.n_pairs);
    for (int i = 0; i < opt.n_pairs; ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(opt.seed, 0x5B117ULL));
    for (int i = opt.n_pairs - 1; i > 0; --i) std::swap(order[i], order[shuffle_rng.below(i + 1)]);
    for (int i = 0; i < opt.n_pairs; ++i) {
        built[order[i]].split = i < sizes.train ? 0 : (i < sizes.train + sizes.val ? 1 : 2);
    }

    // Coverage repair: every split should see every requested type when the
    // counts make it possible.
    std::vector<ChangeType> menu = opt.gen.menu;
    std::sort(menu.begin(), menu.end());
    menu.erase(std::unique(menu.begin(), menu.end()), menu.end());
    auto count_in_split = [&](int split, ChangeType t) {
        int n = 0;
        for (const Built& b : built) {
            if (b.split == split && b.pair.change_types.count(t)) ++n;
        }
        return n;
    };
    for (int pass = 0; pass < 4; ++pass) {
        bool changed = false;
        for (int split = 0; split < 3; ++split) {
            for (ChangeType t : menu) {
                if (count_in_split(split, t) > 0) continue;
                for (Built& donor : built) {
                    if (donor.split == split || !donor.pair.change_types.count(t)) continue;
                    if (count_in_split(donor.split, t) < 2) continue;
                    bool donor_safe = true;
                    for (ChangeType dt : donor.pair.change_types) {
                        if (count_in_split(donor.split, dt) < 2) donor_safe = false;
                    }
                    if (!donor_safe) continue;
                    Built* swap_out = nullptr;
                    for (Built& cand : built) {
                        if (cand.split != split || cand.pair.change_types.count(t)) continue;
                        bool safe = true;
                        for (ChangeType ct : cand.pair.change_types) {
                            if (count_in_split(split, ct) < 2) safe = false;
                        }
                        if (safe) {
                            swap_out = &cand;
                            break;
                        }
                    }
                    if (swap_out == nullptr) continue;
                    std::swap(swap_out->split, donor.split);
                    changed = true;
                    break;
                }
            }
        }
        if (!changed) break;
    }

    static const char* split_names[3] = {"train", "val", "test"};
    std::ofstream manifest(fs::path(opt.out_dir) / "manifest.jsonl");
    std::ofstream scenes(fs::path(opt.out_dir) / "scenes.jsonl");
    if (!manifest || !scenes) throw std::runtime_error("build_corpus: cannot write to " + opt.out_dir);
    std::vector<ManifestRecord> records;
    for (Built& b : built) {
        ChangePair& p = b.pair;
        p.split = split_names[b.split];
        p.image_a_path = "images/" + p.id + "_a.png";
        p.image_b_path = "images/" + p.id + "_b.png";
        write_png((fs::path(opt.out_dir) / p.image_a_path).string(), p.image_a);
        write_png((fs::path(opt.out_dir) / p.image_b_path).string(), p.image_b);
        ManifestRecord rec;
        rec.id = p.id;
        rec.image_a = p.image_a_path;
        rec.image_b = p.image_b_path;
        rec.captions = p.captions;
        for (ChangeType t : p.change_types) rec.change_types.push_back(change_type_name(t));
        rec.split = p.split;
        rec.source = "synthetic";
        manifest << manifest_record_to_json(rec) << "\n";
        records.push_back(rec);

        json sc{{"id", p.id},
                {"spec_a", spec_to_json(p.spec_a)},
                {"spec_b", spec_to_json(p.spec_b)},
                {"jitter",
                 json{{"brightness_mul", p.jitter.brightness_mul}, {"dx", p.jitter.dx}, {"dy", p.jitter.dy}}}};
        scenes << sc.dump() << "\n";
    }
    manifest.close();
    scenes.close();
    if (!manifest || !scenes) throw std::runtime_error("build_corpus: write failed in " + opt.out_dir);
    return compute_stats(records);
}

ValidationReport validate_corpus(const std::string& dir) {
    ValidationReport rep;
    const fs::path root(dir);
    const fs::path manifest_path = root / "manifest.jsonl";
    if (!fs::exists(manifest_path)) {
        rep.errors.push_back("missing manifest.jsonl in " + dir);
        return rep;
    }
    IngestResult ing = ingest_manifest(manifest_path.string());
    rep.errors = ing.errors;
    rep.stats = ing.stats;

    std::map<std::string, std::string> image_split;  // path -> split
    for (const ManifestRecord& rec : ing.records) {
        for (const std::string& img : {rec.image_a, rec.image_b}) {
            const fs::path p = root / img;
            if (!fs::exists(p)) {
                rep.errors.push_back(rec.id + ": missing image file " + img);
                continue;
            }
            try {
                (void)read_png(p.string());
            } catch (const std::exception& e) {
                rep.errors.push_back(rec.id + ": unreadable image " + img + " (" + e.what() + ")");
            }
            auto [it, inserted] = image_split.emplace(img, rec.split);
            if (!inserted) {
                if (it->second != rec.split) {
                    rep.errors.push_back("image " + img + " referenced by splits " + it->second +
                                         " and " + rec.split);
                } else {
                    rep.warnings.push_back("image " + img + " referenced twice within split " +
                                           rec.split);
                }
            }
        }
    }

    // Label audit when the generator sidecar is available.
    const fs::path scenes_path = root / "scenes.jsonl";
    if (fs::exists(scenes_path)) {
        std::map<std::string, std::set<std::string>> declared;
        for (const ManifestRecord& rec : ing.records) {
            declared[rec.id] = std::set<std::string>(rec.change_types.begin(), rec.change_types.end());
        }
        std::ifstream sf(scenes_path);
        std::string line;
        int line_no = 0;
        while (std::getline(sf, line)) {
            ++line_no;
            if (line.empty()) continue;
            try {
                const json j = json::parse(line);
                const std::string id = j.at("id").get<std::string>();
                if (!declared.count(id)) continue;
                const SceneSpec a = spec_from_json(j.at("spec_a"));
                const SceneSpec b = spec_from_json(j.at("spec_b"));
                std::set<std::string> recomputed;
                for (ChangeType t : diff_change_types(a, b)) recomputed.insert(change_type_name(t));
                if (recomputed != declared[id]) {
                    rep.errors.push_back(id + ": declared change types do not match the scene diff");
                }
            } catch (const std::exception& e) {
                rep.errors.push_back("scenes.jsonl line " + std::to_string(line_no) + ": " + e.what());
            }
        }
    }

    // Per-split coverage of the types present in the corpus.
    std::set<std::string> all_types;
    for (const ManifestRecord& rec : ing.records) {
        all_types.insert(rec.change_types.begin(), rec.change_types.end());
    }
    for (const char* split : {"train", "val", "test"}) {
        std::set<std::string> seen;
        for (const ManifestRecord& rec : ing.records) {
            if (rec.split == split) seen.insert(rec.change_types.begin(), rec.change_types.end());
        }
        for (const std::string& t : all_types) {
            if (!seen.count(t)) {
                rep.warnings.push_back("split " + std::string(split) + " lacks change type " + t);
            }
        }
    }
    return rep;
}

int qa_template_count() { return 3; }

const std::string& qa_template(int template_id) {
    static const std::array<std::string, 3> templates = {
        "describe the differences between these two images.",
        "what changed between the first image and the second image?",
        "spot the differences between the two images.",
    };
    if (template_id < 0 || template_id >= qa_template_count()) {
        throw std::invalid_argument("unknown QA template id " + std::to_string(template_id));
    }
    return templates[static_cast<size_t>(template_id)];
}

std::vector<QaSample> to_qa(const ManifestRecord& pair, int template_id) {
    const std::string& q = qa_template(template_id);
    std::vector<QaSample> out;
    for (const std::string& caption : pair.captions) {
        out.push_back(QaSample{q, caption, pair.id});
    }
    return out;
}

std::vector<LoadedPair> load_corpus(const std::string& dir, const std::string& split) {
    IngestResult ing = ingest_manifest((fs::path(dir) / "manifest.jsonl").string());
    if (!ing.errors.empty()) {
        throw std::runtime_error("load_corpus: invalid manifest, first error: " + ing.errors[0]);
    }
    std::vector<LoadedPair> out;
    for (ManifestRecord& rec : ing.records) {
        if (!split.empty() && rec.split != split) continue;
        LoadedPair lp;
        lp.image_a = read_png((fs::path(dir) / rec.image_a).string());
        lp.image_b = read_png((fs::path(dir) / rec.image_b).string());
        lp.record = std::move(rec);
        out.push_back(std::move(lp));
    }
    return out;
}

}  // namespace diffcap
