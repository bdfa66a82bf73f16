#pragma once

#include <array>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "diffcap/image.hpp"

namespace diffcap {

enum class ChangeType {
    viewpoint,
    illumination,
    addition,
    disappearance,
    removal,
    substitution,
    size,
    color,
    orientation,
    pose,
    ocr,
    counting,
};

constexpr int kChangeTypeCount = 12;
const std::array<ChangeType, kChangeTypeCount>& all_change_types();
const std::string& change_type_name(ChangeType t);
ChangeType change_type_from_name(const std::string& name);  // throws on unknown
// Viewpoint and illumination never carry semantic content on their own.
bool is_distractor_type(ChangeType t);

enum class Shape { square, circle, triangle, glyph };
const std::string& shape_name(Shape s);

constexpr int kGridSide = 4;
constexpr int kCellCount = kGridSide * kGridSide;
constexpr int kColorCount = 8;
const std::string& color_name(int color);
const std::array<double, 3>& color_rgb(int color);
constexpr int kLetterCount = 6;
char glyph_letter(int letter);
const std::string& orientation_name(int orientation);
const std::string& pose_name(int pose);

struct SceneObject {
    Shape shape = Shape::square;
    int color = 0;
    bool large = false;
    int orientation = 0;  // triangles point, glyphs rotate
    int cell = 0;
    bool visible = true;
    int letter = 0;  // glyph only
    int pose = 0;    // glyph arm direction

    // Appearance identity: everything except position and visibility.
    std::tuple<int, int, int, int, int, int> appearance() const {
        return {static_cast<int>(shape), color, large ? 1 : 0, orientation, letter, pose};
    }
};

struct SceneSpec {
    std::vector<SceneObject> objects;  // at most one per cell
    double brightness = 1.0;           // [0.5, 1.5]
    int view_dx = 0;                   // {-2..2}
    int view_dy = 0;

    const SceneObject* visible_at(int cell) const;
    int visible_count() const;
};

// Render-time jitter that never shows up in the spec or the labels.
struct DistractorJitter {
    double brightness_mul = 1.0;
    int dx = 0;
    int dy = 0;
};

Image render_scene(const SceneSpec& spec, const DistractorJitter& jitter, int image_size);

std::string location_phrase(int cell);
std::string object_phrase(const SceneObject& obj, bool definite);

// Recomputes the set of change types implied by two scene specs. Used to
// audit generated labels; throws if the diff is not expressible with the
// generator's grammar (moved objects, multi-attribute edits, ...).
std::set<ChangeType> diff_change_types(const SceneSpec& a, const SceneSpec& b);

}  // namespace diffcap
