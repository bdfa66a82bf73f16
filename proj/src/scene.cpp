#include "diffcap/scene.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <tuple>

namespace diffcap {

const std::array<ChangeType, kChangeTypeCount>& all_change_types() {
    static const std::array<ChangeType, kChangeTypeCount> all = {
        ChangeType::viewpoint,    ChangeType::illumination, ChangeType::addition,
        ChangeType::disappearance, ChangeType::removal,      ChangeType::substitution,
        ChangeType::size,         ChangeType::color,        ChangeType::orientation,
        ChangeType::pose,         ChangeType::ocr,          ChangeType::counting,
    };
    return all;
}

const std::string& change_type_name(ChangeType t) {
    static const std::array<std::string, kChangeTypeCount> names = {
        "viewpoint", "illumination", "addition",    "disappearance", "removal", "substitution",
        "size",      "color",        "orientation", "pose",          "ocr",     "counting",
    };
    return names[static_cast<size_t>(t)];
}

ChangeType change_type_from_name(const std::string& name) {
    for (ChangeType t : all_change_types()) {
        if (change_type_name(t) == name) return t;
    }
    throw std::invalid_argument("unknown change type: " + name);
}

bool is_distractor_type(ChangeType t) {
    return t == ChangeType::viewpoint || t == ChangeType::illumination;
}

const std::string& shape_name(Shape s) {
    static const std::array<std::string, 4> names = {"square", "circle", "triangle", "glyph"};
    return names[static_cast<size_t>(s)];
}

const std::string& color_name(int color) {
    static const std::array<std::string, kColorCount> names = {
        "red", "green", "blue", "yellow", "orange", "purple", "cyan", "magenta"};
    return names[static_cast<size_t>(color)];
}

const std::array<double, 3>& color_rgb(int color) {
    static const std::array<std::array<double, 3>, kColorCount> rgb = {{
        {0.85, 0.10, 0.10},
        {0.10, 0.65, 0.15},
        {0.15, 0.25, 0.85},
        {0.90, 0.85, 0.10},
        {0.95, 0.55, 0.10},
        {0.55, 0.15, 0.70},
        {0.10, 0.75, 0.80},
        {0.85, 0.15, 0.70},
    }};
    return rgb[static_cast<size_t>(color)];
}

char glyph_letter(int letter) {
    static const char letters[kLetterCount + 1] = "aefhlt";
    return letters[letter];
}

const std::string& orientation_name(int orientation) {
    static const std::array<std::string, 4> names = {"up", "right", "down", "left"};
    return names[static_cast<size_t>(orientation)];
}

const std::string& pose_name(int pose) {
    static const std::array<std::string, 4> names = {"up right", "down right", "down left",
                                                     "up left"};
    return names[static_cast<size_t>(pose)];
}

const SceneObject* SceneSpec::visible_at(int cell) const {
    for (const SceneObject& o : objects) {
        if (o.cell == cell && o.visible) return &o;
    }
    return nullptr;
}

int SceneSpec::visible_count() const {
    int n = 0;
    for (const SceneObject& o : objects) n += o.visible ? 1 : 0;
    return n;
}

namespace {

struct Pt {
    double x, y;
};

Pt rotate(Pt p, int quarter_turns) {
    switch (quarter_turns & 3) {
        case 0: return p;
        case 1: return {-p.y, p.x};
        case 2: return {-p.x, -p.y};
        default: return {p.y, -p.x};
    }
}

double cross(Pt o, Pt a, Pt b) { return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x); }

bool in_triangle(Pt p, Pt a, Pt b, Pt c) {
    const double d1 = cross(p, a, b);
    const double d2 = cross(p, b, c);
    const double d3 = cross(p, c, a);
    const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
    const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
    return !(has_neg && has_pos);
}

double dist_to_segment(Pt p, Pt a, Pt b) {
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double px = a.x + t * dx - p.x, py = a.y + t * dy - p.y;
    return std::sqrt(px * px + py * py);
}

// Letter strokes in a [-1,1] box, y growing downward.
const std::vector<std::pair<Pt, Pt>>& letter_strokes(int letter) {
    static const std::array<std::vector<std::pair<Pt, Pt>>, kLetterCount> strokes = {{
        // a
        {{{{-0.7, 1.0}, {0.0, -1.0}}, {{0.7, 1.0}, {0.0, -1.0}}, {{-0.38, 0.2}, {0.38, 0.2}}}},
        // e
        {{{{-0.6, -1.0}, {-0.6, 1.0}}, {{-0.6, -1.0}, {0.6, -1.0}}, {{-0.6, 0.0}, {0.4, 0.0}},
          {{-0.6, 1.0}, {0.6, 1.0}}}},
        // f
        {{{{-0.6, -1.0}, {-0.6, 1.0}}, {{-0.6, -1.0}, {0.6, -1.0}}, {{-0.6, 0.0}, {0.4, 0.0}}}},
        // h
        {{{{-0.6, -1.0}, {-0.6, 1.0}}, {{0.6, -1.0}, {0.6, 1.0}}, {{-0.6, 0.0}, {0.6, 0.0}}}},
        // l
        {{{{-0.5, -1.0}, {-0.5, 1.0}}, {{-0.5, 1.0}, {0.6, 1.0}}}},
        // t
        {{{{-0.7, -1.0}, {0.7, -1.0}}, {{0.0, -1.0}, {0.0, 1.0}}}},
    }};
    return strokes[static_cast<size_t>(letter)];
}

Pt pose_arm_dir(int pose) {
    static const std::array<Pt, 4> dirs = {{{0.8, -0.8}, {0.8, 0.8}, {-0.8, 0.8}, {-0.8, -0.8}}};
    return dirs[static_cast<size_t>(pose)];
}

bool covers(const SceneObject& o, double px, double py, double cx, double cy, double radius,
            double stroke) {
    const Pt p{px - cx, py - cy};
    switch (o.shape) {
        case Shape::square:
            return std::fabs(p.x) <= radius && std::fabs(p.y) <= radius;
        case Shape::circle:
            return p.x * p.x + p.y * p.y <= radius * radius;
        case Shape::triangle: {
            const Pt a = rotate({0.0, -radius}, o.orientation);
            const Pt b = rotate({-radius, radius}, o.orientation);
            const Pt c = rotate({radius, radius}, o.orientation);
            return in_triangle(p, a, b, c);
        }
        case Shape::glyph: {
            for (const auto& [s0, s1] : letter_strokes(o.letter)) {
                const Pt a = rotate({s0.x * radius, s0.y * radius}, o.orientation);
                const Pt b = rotate({s1.x * radius, s1.y * radius}, o.orientation);
                if (dist_to_segment(p, a, b) <= stroke) return true;
            }
            const Pt arm = pose_arm_dir(o.pose);
            const Pt tip = rotate({arm.x * radius, arm.y * radius}, o.orientation);
            return dist_to_segment(p, {0.0, 0.0}, tip) <= stroke;
        }
    }
    return false;
}

constexpr double kBackground = 0.84;

}  // namespace

Image render_scene(const SceneSpec& spec, const DistractorJitter& jitter, int image_size) {
    if (image_size < kGridSide || image_size % kGridSide != 0) {
        throw std::invalid_argument("render_scene: image size must be a multiple of " +
                                    std::to_string(kGridSide));
    }
    const double cell = static_cast<double>(image_size) / kGridSide;
    Image base(image_size, image_size);
    base.fill(kBackground, kBackground, kBackground);

    for (const SceneObject& o : spec.objects) {
        if (!o.visible) continue;
        const int row = o.cell / kGridSide;
        const int col = o.cell % kGridSide;
        const double cx = (col + 0.5) * cell;
        const double cy = (row + 0.5) * cell;
        const double radius = (o.large ? 0.40 : 0.25) * cell;
        const double stroke = std::max(0.75, 0.09 * cell);
        const auto& rgb = color_rgb(o.color);
        const int x0 = static_cast<int>(col * cell), x1 = static_cast<int>((col + 1) * cell);
        const int y0 = static_cast<int>(row * cell), y1 = static_cast<int>((row + 1) * cell);
        for (int y = y0; y < y1; ++y) {
            for (int x = x0; x < x1; ++x) {
                if (covers(o, x + 0.5, y + 0.5, cx, cy, radius, stroke)) {
                    base.at(x, y, 0) = rgb[0];
                    base.at(x, y, 1) = rgb[1];
                    base.at(x, y, 2) = rgb[2];
                }
            }
        }
    }

    const double gain = spec.brightness * jitter.brightness_mul;
    const int dx = spec.view_dx + jitter.dx;
    const int dy = spec.view_dy + jitter.dy;
    Image out(image_size, image_size);
    for (int y = 0; y < image_size; ++y) {
        for (int x = 0; x < image_size; ++x) {
            const int sx = x - dx, sy = y - dy;
            for (int c = 0; c < 3; ++c) {
                const double v = (sx >= 0 && sx < image_size && sy >= 0 && sy < image_size)
                                     ? base.at(sx, sy, c)
                                     : kBackground;
                out.at(x, y, c) = std::clamp(v * gain, 0.0, 1.0);
            }
        }
    }
    return out;
}

std::string location_phrase(int cell) {
    const int row = cell / kGridSide;
    const int col = cell % kGridSide;
    std::string vert = row == 0 ? "top" : row == kGridSide - 1 ? "bottom" : "";
    std::string horiz = col == 0 ? "left" : col == kGridSide - 1 ? "right" : "";
    if (vert.empty() && horiz.empty()) return "center";
    if (vert.empty()) return horiz;
    if (horiz.empty()) return vert;
    return vert + " " + horiz;
}

std::string object_phrase(const SceneObject& obj, bool definite) {
    std::string noun = obj.shape == Shape::glyph
                           ? std::string("letter ") + glyph_letter(obj.letter)
                           : shape_name(obj.shape);
    return std::string(definite ? "the " : "a ") + (obj.large ? "large " : "small ") +
           color_name(obj.color) + " " + noun;
}

std::set<ChangeType> diff_change_types(const SceneSpec& a, const SceneSpec& b) {
    std::set<ChangeType> types;
    if (a.brightness != b.brightness) types.insert(ChangeType::illumination);
    if (a.view_dx != b.view_dx || a.view_dy != b.view_dy) types.insert(ChangeType::viewpoint);

    std::map<int, const SceneObject*> av, bv;
    for (const SceneObject& o : a.objects) {
        if (o.visible) av[o.cell] = &o;
    }
    for (const SceneObject& o : b.objects) {
        if (o.visible) bv[o.cell] = &o;
    }

    using Appearance = std::tuple<int, int, int, int, int, int>;
    std::vector<const SceneObject*> unmatched_a, unmatched_b;
    for (const auto& [cell, oa] : av) {
        auto it = bv.find(cell);
        if (it == bv.end()) {
            unmatched_a.push_back(oa);
            continue;
        }
        const SceneObject* ob = it->second;
        if (oa->appearance() == ob->appearance()) continue;
        if (oa->shape != ob->shape) {
            types.insert(ChangeType::substitution);
            continue;
        }
        int diffs = 0;
        ChangeType attr = ChangeType::color;
        if (oa->color != ob->color) {
            ++diffs;
            attr = ChangeType::color;
        }
        if (oa->large != ob->large) {
            ++diffs;
            attr = ChangeType::size;
        }
        if (oa->orientation != ob->orientation) {
            ++diffs;
            attr = ChangeType::orientation;
        }
        if (oa->letter != ob->letter) {
            ++diffs;
            attr = ChangeType::ocr;
        }
        if (oa->pose != ob->pose) {
            ++diffs;
            attr = ChangeType::pose;
        }
        if (diffs != 1) {
            throw std::runtime_error("diff_change_types: ambiguous multi-attribute edit at cell " +
                                     std::to_string(cell));
        }
        types.insert(attr);
    }
    for (const auto& [cell, ob] : bv) {
        if (!av.count(cell)) unmatched_b.push_back(ob);
    }

    std::map<Appearance, std::pair<int, int>> unmatched;  // class -> (a count, b count)
    for (const SceneObject* o : unmatched_a) unmatched[o->appearance()].first++;
    for (const SceneObject* o : unmatched_b) unmatched[o->appearance()].second++;

    auto visible_class_count = [](const SceneSpec& s, const Appearance& k) {
        int n = 0;
        for (const SceneObject& o : s.objects) {
            if (o.visible && o.appearance() == k) ++n;
        }
        return n;
    };

    for (const auto& [klass, counts] : unmatched) {
        const auto [ua, ub] = counts;
        if (ua > 0 && ub > 0) {
            throw std::runtime_error("diff_change_types: object appears to have moved");
        }
        if (ub > 0) {
            if (visible_class_count(a, klass) >= 1) {
                types.insert(ChangeType::counting);
            } else if (ub == 1) {
                types.insert(ChangeType::addition);
            } else {
                throw std::runtime_error("diff_change_types: multiple new objects of a new class");
            }
        } else if (ua > 0) {
            if (visible_class_count(b, klass) >= 1) {
                types.insert(ChangeType::counting);
            } else if (ua == 1) {
                bool hidden = false;
                for (const SceneObject& o : b.objects) {
                    if (!o.visible && o.appearance() == klass) hidden = true;
                }
                types.insert(hidden ? ChangeType::disappearance : ChangeType::removal);
            } else {
                throw std::runtime_error("diff_change_types: multiple vanished objects of one class");
            }
        }
    }
    return types;
}

}  // namespace diffcap
