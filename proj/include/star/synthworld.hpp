// Deterministic synthetic scene corpus and its exact oracle evaluators.
//
// Scenes live on a 3x3 cell grid, at most one object per cell, each object a
// (shape, color, cell, size) tuple over small exact enums. The renderer, the
// caption grammar and the image parser are mutual inverses on clean data,
// which is what makes the downstream generation/editing scores oracles
// rather than approximations.
#pragma once

#include <json.hpp>

#include <array>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "star/common.hpp"
#include "star/random.hpp"
#include "star/transformer.hpp"

namespace star::world {

// ---------------------------------------------------------------------------
// Scene domain
// ---------------------------------------------------------------------------

enum class ObjShape : int { circle = 0, square, triangle, cross };
enum class Color : int { black = 0, red, green, blue, yellow, magenta, cyan, white };
enum class ObjSize : int { small = 0, large };

constexpr int kShapes = 4;
constexpr int kColors = 8;
constexpr int kCells = 9;
constexpr int kMaxObjects = 3;

inline const char* shape_name(ObjShape s) {
  static const char* n[] = {"circle", "square", "triangle", "cross"};
  return n[static_cast<int>(s)];
}
inline const char* shape_plural(ObjShape s) {
  static const char* n[] = {"circles", "squares", "triangles", "crosses"};
  return n[static_cast<int>(s)];
}
inline const char* color_name(Color c) {
  static const char* n[] = {"black", "red", "green", "blue", "yellow", "magenta", "cyan", "white"};
  return n[static_cast<int>(c)];
}
inline const char* size_name(ObjSize s) { return s == ObjSize::small ? "small" : "large"; }
inline const char* cell_name(int cell) {
  static const char* n[] = {"top left",    "top center",    "top right",
                            "middle left", "center",        "middle right",
                            "bottom left", "bottom center", "bottom right"};
  return n[cell];
}

struct SceneObject {
  ObjShape shape = ObjShape::circle;
  Color color = Color::red;
  int cell = 0;
  ObjSize size = ObjSize::large;

  bool operator==(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;  // kept sorted by cell

  void canonicalize() {
    std::sort(objects.begin(), objects.end(),
              [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  }

  void validate() const {
    if (objects.size() > kMaxObjects) throw ContractError("scene has too many objects");
    for (size_t i = 0; i < objects.size(); ++i) {
      const auto& o = objects[i];
      if (o.cell < 0 || o.cell >= kCells) throw ContractError("object cell out of range");
      for (size_t j = i + 1; j < objects.size(); ++j)
        if (objects[j].cell == o.cell) throw ContractError("two objects share a cell");
    }
  }

  const SceneObject* at_cell(int cell) const {
    for (const auto& o : objects)
      if (o.cell == cell) return &o;
    return nullptr;
  }

  bool operator==(const SceneSpec&) const = default;
};

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& o : s.objects)
    arr.push_back({{"shape", shape_name(o.shape)},
                   {"color", color_name(o.color)},
                   {"cell", o.cell},
                   {"size", size_name(o.size)}});
  return arr;
}

inline SceneSpec scene_from_json(const nlohmann::json& arr) {
  auto find_name = [](const char* const* names, int count, const std::string& v, const char* what) {
    for (int i = 0; i < count; ++i)
      if (v == names[i]) return i;
    throw ConfigError(std::string("unknown ") + what + ": " + v);
  };
  static const char* shapes[] = {"circle", "square", "triangle", "cross"};
  static const char* colors[] = {"black", "red",     "green", "blue",
                                 "yellow", "magenta", "cyan",  "white"};
  SceneSpec s;
  for (const auto& j : arr) {
    SceneObject o;
    o.shape = static_cast<ObjShape>(find_name(shapes, kShapes, j.at("shape"), "shape"));
    o.color = static_cast<Color>(find_name(colors, kColors, j.at("color"), "color"));
    o.cell = j.at("cell").get<int>();
    o.size = j.at("size").get<std::string>() == "small" ? ObjSize::small : ObjSize::large;
    s.objects.push_back(o);
  }
  s.canonicalize();
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

// Palette: the 8 RGB cube corners (pairwise distance >= 1), background mid
// gray so every color sits 0.866 away from it.
constexpr float kPalette[kColors][3] = {
    {0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {0, 0, 1},
    {1, 1, 0}, {1, 0, 1}, {0, 1, 1}, {1, 1, 1},
};
constexpr float kBackground[3] = {0.5f, 0.5f, 0.5f};

struct Image {
  int size = 0;  // square, 16 or 32
  std::vector<float> rgb;  // size*size*3, row-major

  float* px(int y, int x) { return rgb.data() + (static_cast<size_t>(y) * size + x) * 3; }
  const float* px(int y, int x) const {
    return rgb.data() + (static_cast<size_t>(y) * size + x) * 3;
  }
};

namespace detail {

// 5x5 occupancy masks per (shape, size); '#' marks object pixels.
inline const std::array<const char*, 5>& shape_mask(ObjShape shape, ObjSize size) {
  static const std::array<const char*, 5> masks[kShapes][2] = {
      // circle: small diamond / fat disc
      {{".....", "..#..", ".###.", "..#..", "....."},
       {".###.", "#####", "#####", "#####", ".###."}},
      // square
      {{".....", ".###.", ".###.", ".###.", "....."},
       {"#####", "#####", "#####", "#####", "#####"}},
      // triangle
      {{".....", "..#..", "..#..", ".###.", "....."},
       {"..#..", ".###.", "#####", "#####", "#####"}},
      // cross: saltire at both sizes
      {{".....", ".#.#.", "..#..", ".#.#.", "....."},
       {"#...#", ".#.#.", "..#..", ".#.#.", "#...#"}},
  };
  return masks[static_cast<int>(shape)][static_cast<int>(size)];
}

// Cell boxes tile rows/cols 1..15 (16px) or 2..31 (32px); the 32px render is
// the exact 2x nearest upscale of the 16px one.
inline int cell_origin(int cell_rc, int res) { return res == 16 ? 1 + 5 * cell_rc : 2 + 10 * cell_rc; }
inline int cell_extent(int res) { return res == 16 ? 5 : 10; }

}  // namespace detail

namespace detail {
inline Image render_unchecked(const SceneSpec& scene, int res);
}

inline Image render(const SceneSpec& scene, int res = 16) {
  if (res != 16 && res != 32) throw ConfigError("render: resolution must be 16 or 32");
  scene.validate();
  return detail::render_unchecked(scene, res);
}

namespace detail {

// Also used for provisional scenes during parsing, which may occupy more
// cells than a valid SceneSpec allows.
inline Image render_unchecked(const SceneSpec& scene, int res) {
  Image img;
  img.size = res;
  img.rgb.assign(static_cast<size_t>(res) * res * 3, 0.f);
  for (int y = 0; y < res; ++y)
    for (int x = 0; x < res; ++x)
      std::copy_n(kBackground, 3, img.px(y, x));
  int ext = detail::cell_extent(res);
  int scale = ext / 5;
  for (const auto& o : scene.objects) {
    int r = o.cell / 3, c = o.cell % 3;
    int oy = detail::cell_origin(r, res), ox = detail::cell_origin(c, res);
    const auto& mask = detail::shape_mask(o.shape, o.size);
    for (int my = 0; my < 5; ++my)
      for (int mx = 0; mx < 5; ++mx) {
        if (mask[my][mx] != '#') continue;
        for (int sy = 0; sy < scale; ++sy)
          for (int sx = 0; sx < scale; ++sx)
            std::copy_n(kPalette[static_cast<int>(o.color)], 3,
                        img.px(oy + my * scale + sy, ox + mx * scale + sx));
      }
  }
  return img;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Oracle parsing
// ---------------------------------------------------------------------------

struct ParseResult {
  SceneSpec scene;
  bool flagged = false;          // any cell ambiguous or below threshold
  int unknown_cells = 0;
};

namespace detail {

// Per-pixel penalty: per-channel L1 distance to the expected color, scaled so
// that 40% of a background-to-corner distance already saturates. L1 keeps
// independent error sources additive (bleed from a neighboring cell cannot
// swallow a candidate's own mismatch), and the steep scale keeps the 0.05
// ambiguity window meaningful under mild reconstruction noise.
inline float pixel_penalty_l1(const float* img_px, const float* expect) {
  float d = std::abs(img_px[0] - expect[0]) + std::abs(img_px[1] - expect[1]) +
            std::abs(img_px[2] - expect[2]);
  return std::min(1.f, d * (10.f / 3.f));
}

// Object-coverage map for one candidate at a given resolution: 1 inside the
// shape, 0 on background, in-between for the blur-degraded arm (3x3 box with
// background assumed outside the cell).
inline std::vector<float> coverage_map(ObjShape shape, ObjSize size, int ext, bool blurred) {
  int scale = ext / 5;
  std::vector<float> cov(static_cast<size_t>(ext) * ext, 0.f);
  const auto& mask = shape_mask(shape, size);
  for (int y = 0; y < ext; ++y)
    for (int x = 0; x < ext; ++x)
      cov[static_cast<size_t>(y) * ext + x] = mask[y / scale][x / scale] == '#' ? 1.f : 0.f;
  if (!blurred) return cov;
  std::vector<float> out(cov.size(), 0.f);
  for (int y = 0; y < ext; ++y)
    for (int x = 0; x < ext; ++x) {
      float acc = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < ext && xx >= 0 && xx < ext)
            acc += cov[static_cast<size_t>(yy) * ext + xx];
        }
      out[static_cast<size_t>(y) * ext + x] = acc / 9.f;
    }
  return out;
}

struct TemplateBank {
  // [shape][size][arm] -> coverage map; arm 0 crisp, arm 1 blurred
  std::vector<float> cov[kShapes][2][2];
  int ext;

  explicit TemplateBank(int ext_in) : ext(ext_in) {
    for (int sh = 0; sh < kShapes; ++sh)
      for (int sz = 0; sz < 2; ++sz)
        for (int arm = 0; arm < 2; ++arm)
          cov[sh][sz][arm] = coverage_map(static_cast<ObjShape>(sh), static_cast<ObjSize>(sz),
                                          ext, arm == 1);
  }

  static const TemplateBank& at(int res) {
    static TemplateBank b16(5), b32(10);
    return res == 16 ? b16 : b32;
  }
};

}  // namespace detail

namespace detail {

struct CellVerdict {
  float best = -1.f, second = -1.f;
  std::optional<SceneObject> best_obj;  // nullopt = empty

  void consider(const std::optional<SceneObject>& cand, float s) {
    if (s > best) {
      second = best;
      best = s;
      best_obj = cand;
    } else if (s > second) {
      second = s;
    }
  }
  bool confident() const { return best >= 0.7f && best - second >= 0.05f; }
};

// Context-free scoring: each candidate against its crisp rendering and a
// blur-degraded variant (background assumed outside the cell); better arm
// wins. Bails out of an arm once it cannot beat the runner-up.
inline CellVerdict score_cell(const Image& img, int cell) {
  const int ext = cell_extent(img.size);
  const auto& bank = TemplateBank::at(img.size);
  const float n_px = static_cast<float>(ext * ext);
  const int oy = cell_origin(cell / 3, img.size), ox = cell_origin(cell % 3, img.size);
  CellVerdict v;
  auto arm_score = [&](const float* cov, const float* color, float kill_penalty) {
    float penalty = 0;
    for (int y = 0; y < ext && penalty < kill_penalty; ++y)
      for (int x = 0; x < ext; ++x) {
        float lam = cov ? cov[y * ext + x] : 0.f;
        float expect[3] = {kBackground[0] + lam * (color[0] - kBackground[0]),
                           kBackground[1] + lam * (color[1] - kBackground[1]),
                           kBackground[2] + lam * (color[2] - kBackground[2])};
        penalty += pixel_penalty_l1(img.px(oy + y, ox + x), expect);
      }
    return 1.f - penalty / n_px;
  };
  v.consider(std::nullopt, arm_score(nullptr, kBackground, n_px));
  for (int sh = 0; sh < kShapes; ++sh)
    for (int sz = 0; sz < 2; ++sz)
      for (int co = 0; co < kColors; ++co) {
        SceneObject cand{static_cast<ObjShape>(sh), static_cast<Color>(co), cell,
                         static_cast<ObjSize>(sz)};
        float kill = (1.f - v.second) * n_px + 1.f;
        float s = arm_score(bank.cov[sh][sz][0].data(), kPalette[co], kill);
        float s2 = arm_score(bank.cov[sh][sz][1].data(), kPalette[co], kill);
        v.consider(cand, std::max(s, s2));
      }
  return v;
}

// Context-aware rescoring for inconclusive cells: blur templates are built
// from the provisional scene with this cell's content swapped for the
// candidate, so bleed from same-color neighbors is modeled instead of
// mistaken for shape evidence.
inline CellVerdict rescore_cell(const Image& img, int cell, const Image& provisional) {
  const int ext = cell_extent(img.size);
  const float n_px = static_cast<float>(ext * ext);
  const int oy = cell_origin(cell / 3, img.size), ox = cell_origin(cell % 3, img.size);
  const auto& bank = TemplateBank::at(img.size);
  CellVerdict v;

  auto source_px = [&](const SceneObject* cand, int y, int x, float* out3) {
    if (y >= oy && y < oy + ext && x >= ox && x < ox + ext) {
      const float* color = kBackground;
      if (cand) {
        const float* cov = bank.cov[static_cast<int>(cand->shape)][static_cast<int>(cand->size)][0]
                               .data();
        if (cov[(y - oy) * ext + (x - ox)] > 0.5f) color = kPalette[static_cast<int>(cand->color)];
      }
      std::copy_n(color, 3, out3);
    } else {
      std::copy_n(provisional.px(y, x), 3, out3);
    }
  };

  auto score = [&](const SceneObject* cand, bool blur_arm, float kill_penalty) {
    float penalty = 0;
    for (int y = 0; y < ext && penalty < kill_penalty; ++y)
      for (int x = 0; x < ext; ++x) {
        float expect[3];
        if (!blur_arm) {
          source_px(cand, oy + y, ox + x, expect);
        } else {
          float acc[3] = {0, 0, 0};
          int n = 0;
          for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
              int yy = oy + y + dy, xx = ox + x + dx;
              if (yy < 0 || yy >= img.size || xx < 0 || xx >= img.size) continue;
              float s3[3];
              source_px(cand, yy, xx, s3);
              for (int ch = 0; ch < 3; ++ch) acc[ch] += s3[ch];
              ++n;
            }
          for (int ch = 0; ch < 3; ++ch) expect[ch] = acc[ch] / static_cast<float>(n);
        }
        penalty += pixel_penalty_l1(img.px(oy + y, ox + x), expect);
      }
    return 1.f - penalty / n_px;
  };

  auto both_arms = [&](const SceneObject* cand) {
    float kill = (1.f - v.second) * n_px + 1.f;
    return std::max(score(cand, false, kill), score(cand, true, kill));
  };

  v.consider(std::nullopt, both_arms(nullptr));
  for (int sh = 0; sh < kShapes; ++sh)
    for (int sz = 0; sz < 2; ++sz)
      for (int co = 0; co < kColors; ++co) {
        SceneObject cand{static_cast<ObjShape>(sh), static_cast<Color>(co), cell,
                         static_cast<ObjSize>(sz)};
        v.consider(cand, both_arms(&cand));
      }
  return v;
}

}  // namespace detail

// Best template per cell with match score threshold 0.7; two candidates
// within 0.05 mark the cell unknown and flag the scene. Confident cells are
// decided context-free; inconclusive ones get a second pass whose blur
// templates account for the provisional content of neighboring cells.
inline ParseResult parse_image(const Image& img) {
  if (img.size != 16 && img.size != 32) throw ConfigError("parse_image: resolution must be 16 or 32");
  std::array<detail::CellVerdict, kCells> verdicts;
  bool any_pending = false;
  for (int cell = 0; cell < kCells; ++cell) {
    verdicts[static_cast<size_t>(cell)] = detail::score_cell(img, cell);
    any_pending = any_pending || !verdicts[static_cast<size_t>(cell)].confident();
  }
  if (any_pending) {
    SceneSpec provisional;
    for (int cell = 0; cell < kCells; ++cell)
      if (auto& o = verdicts[static_cast<size_t>(cell)].best_obj) provisional.objects.push_back(*o);
    Image rendered = detail::render_unchecked(provisional, img.size);
    for (int cell = 0; cell < kCells; ++cell)
      if (!verdicts[static_cast<size_t>(cell)].confident())
        verdicts[static_cast<size_t>(cell)] = detail::rescore_cell(img, cell, rendered);
  }

  ParseResult out;
  for (int cell = 0; cell < kCells; ++cell) {
    const auto& v = verdicts[static_cast<size_t>(cell)];
    if (!v.confident()) {
      ++out.unknown_cells;
      out.flagged = true;
      continue;
    }
    if (v.best_obj) out.scene.objects.push_back(*v.best_obj);
  }
  out.scene.canonicalize();
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and captions
// ---------------------------------------------------------------------------

inline std::vector<std::string> knowledge_names() {
  static const char* first[] = {"zor", "mal", "ten", "vek", "qua", "bri", "sol", "nim"};
  static const char* second[] = {"bia", "dor", "eth", "ion", "ula", "ark", "ese", "oth"};
  std::vector<std::string> names;
  for (const char* a : first)
    for (const char* b : second) names.push_back(std::string(a) + b);
  return names;
}

class Vocabulary {
 public:
  static const Vocabulary& instance() {
    static Vocabulary v;
    return v;
  }

  int size() const { return static_cast<int>(words_.size()); }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    if (it == index_.end()) throw ConfigError("word not in vocabulary: '" + w + "'");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw IndexError("word id out of range: " + std::to_string(id));
    return words_[static_cast<size_t>(id)];
  }

  std::vector<int> encode(const std::string& sentence) const {
    std::vector<int> out;
    std::istringstream is(sentence);
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  Vocabulary() {
    const char* base[] = {
        "a",     "an",     "the",   "in",      "and",   "is",     "of",     "to",
        "with",  "scene",  "empty", "image",   "flag",  "keep",   "unchanged", "add",
        "remove", "make",  "move",  "replace", "describe", "this", "what",
        "small", "large",
        "black", "red",   "green", "blue",    "yellow", "magenta", "cyan",  "white",
        "circle", "square", "triangle", "cross",
        "circles", "squares", "triangles", "crosses",
        "top",   "bottom", "middle", "center", "left",  "right",
        "one",   "two",    "three",
    };
    for (const char* w : base) words_.emplace_back(w);
    for (const auto& n : knowledge_names()) words_.push_back(n);
    for (size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

// Control tokens shared by every sequence layout.
enum class Ctl : int { bos = 0, eos, boa, boi_src, reason, eor, boi, eoi };
constexpr int kControlCount = 8;

inline VocabLayout make_vocab_layout(int codebook_size) {
  return VocabLayout{Vocabulary::instance().size(), kControlCount, codebook_size};
}

inline int control_id(Ctl c, const VocabLayout& v) { return v.control_begin() + static_cast<int>(c); }
inline int visual_id(int code, const VocabLayout& v) { return v.visual_begin() + code; }

inline std::string object_phrase(const SceneObject& o) {
  std::string s = "a ";
  s += size_name(o.size);
  s += ' ';
  s += color_name(o.color);
  s += ' ';
  s += shape_name(o.shape);
  s += " in the ";
  s += cell_name(o.cell);
  return s;
}

// Canonical caption: every attribute of every object, cell-sorted, so the
// grammar is injective over scenes.
inline std::string caption(const SceneSpec& scene) {
  if (scene.objects.empty()) return "an empty scene";
  SceneSpec s = scene;
  s.canonicalize();
  std::string out;
  for (size_t i = 0; i < s.objects.size(); ++i) {
    if (i) out += " and ";
    out += object_phrase(s.objects[i]);
  }
  return out;
}

inline std::vector<int> caption_tokens(const SceneSpec& scene) {
  return Vocabulary::instance().encode(caption(scene));
}

namespace detail {

inline int parse_cell_name(const std::vector<std::string>& w, size_t& at) {
  auto need = [&](size_t more) {
    if (at + more > w.size()) throw ContractError("caption ends inside a position name");
  };
  need(1);
  if (w[at] == "center") {
    ++at;
    return 4;
  }
  need(2);
  int row = w[at] == "top" ? 0 : w[at] == "middle" ? 1 : w[at] == "bottom" ? 2 : -1;
  ++at;
  int col = w[at] == "left" ? 0 : w[at] == "center" ? 1 : w[at] == "right" ? 2 : -1;
  ++at;
  if (row < 0 || col < 0) throw ContractError("bad position name in caption");
  return row * 3 + col;
}

inline std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

inline int name_index(const char* const* names, int count, const std::string& v) {
  for (int i = 0; i < count; ++i)
    if (v == names[i]) return i;
  return -1;
}

}  // namespace detail

// Exact inverse of caption().
inline SceneSpec parse_caption(const std::string& text) {
  auto w = detail::split_words(text);
  SceneSpec scene;
  if (w.size() == 3 && w[0] == "an" && w[1] == "empty" && w[2] == "scene") return scene;
  static const char* shapes[] = {"circle", "square", "triangle", "cross"};
  static const char* colors[] = {"black", "red",     "green", "blue",
                                 "yellow", "magenta", "cyan",  "white"};
  size_t at = 0;
  while (at < w.size()) {
    if (at > 0) {
      if (w[at] != "and") throw ContractError("expected 'and' between objects");
      ++at;
    }
    if (at + 6 > w.size() || w[at] != "a") throw ContractError("malformed object phrase");
    SceneObject o;
    o.size = w[at + 1] == "small" ? ObjSize::small : ObjSize::large;
    if (w[at + 1] != "small" && w[at + 1] != "large") throw ContractError("bad size word");
    int ci = detail::name_index(colors, kColors, w[at + 2]);
    int si = detail::name_index(shapes, kShapes, w[at + 3]);
    if (ci < 0 || si < 0) throw ContractError("bad color/shape word");
    o.color = static_cast<Color>(ci);
    o.shape = static_cast<ObjShape>(si);
    if (w[at + 4] != "in" || w[at + 5] != "the") throw ContractError("expected 'in the'");
    at += 6;
    o.cell = detail::parse_cell_name(w, at);
    scene.objects.push_back(o);
  }
  scene.canonicalize();
  scene.validate();
  return scene;
}

inline SceneSpec parse_caption_tokens(const std::vector<int>& ids) {
  return parse_caption(Vocabulary::instance().decode(ids));
}

// ---------------------------------------------------------------------------
// Prompt suites (generation oracle)
// ---------------------------------------------------------------------------

enum class PromptCategory : int { single = 0, two, counting, colors, position, color_attr };
constexpr int kPromptCategories = 6;

inline const char* category_name(PromptCategory c) {
  static const char* n[] = {"single", "two", "counting", "colors", "position", "color_attr"};
  return n[static_cast<int>(c)];
}

struct PromptSpec {
  PromptCategory category = PromptCategory::single;
  ObjShape shape_a = ObjShape::circle;
  ObjShape shape_b = ObjShape::circle;
  Color color_a = Color::red;
  Color color_b = Color::red;
  int count = 2;  // counting only, 2 or 3
  int cell = 0;   // position only
};

inline std::string prompt_text(const PromptSpec& p) {
  switch (p.category) {
    case PromptCategory::single:
      return std::string("a ") + shape_name(p.shape_a);
    case PromptCategory::two:
      return std::string("a ") + shape_name(p.shape_a) + " and a " + shape_name(p.shape_b);
    case PromptCategory::counting:
      return std::string(p.count == 2 ? "two " : "three ") + shape_plural(p.shape_a);
    case PromptCategory::colors:
      return std::string("a ") + color_name(p.color_a) + " " + shape_name(p.shape_a);
    case PromptCategory::position:
      return std::string("a ") + shape_name(p.shape_a) + " in the " + cell_name(p.cell);
    case PromptCategory::color_attr:
      return std::string("a ") + color_name(p.color_a) + " " + shape_name(p.shape_a) + " and a " +
             color_name(p.color_b) + " " + shape_name(p.shape_b);
  }
  throw ContractError("bad prompt category");
}

inline bool satisfies(const PromptSpec& p, const SceneSpec& s) {
  auto count_shape = [&](ObjShape sh) {
    int n = 0;
    for (const auto& o : s.objects) n += o.shape == sh;
    return n;
  };
  switch (p.category) {
    case PromptCategory::single:
      return s.objects.size() == 1 && s.objects[0].shape == p.shape_a;
    case PromptCategory::two: {
      if (s.objects.size() != 2) return false;
      if (p.shape_a == p.shape_b) return count_shape(p.shape_a) == 2;
      return count_shape(p.shape_a) == 1 && count_shape(p.shape_b) == 1;
    }
    case PromptCategory::counting:
      return static_cast<int>(s.objects.size()) == p.count &&
             count_shape(p.shape_a) == static_cast<int>(s.objects.size());
    case PromptCategory::colors:
      return s.objects.size() == 1 && s.objects[0].shape == p.shape_a &&
             s.objects[0].color == p.color_a;
    case PromptCategory::position:
      return s.objects.size() == 1 && s.objects[0].shape == p.shape_a &&
             s.objects[0].cell == p.cell;
    case PromptCategory::color_attr: {
      if (s.objects.size() != 2) return false;
      auto match = [&](const SceneObject& o, ObjShape sh, Color co) {
        return o.shape == sh && o.color == co;
      };
      return (match(s.objects[0], p.shape_a, p.color_a) &&
              match(s.objects[1], p.shape_b, p.color_b)) ||
             (match(s.objects[0], p.shape_b, p.color_b) &&
              match(s.objects[1], p.shape_a, p.color_a));
    }
  }
  return false;
}

namespace detail {

inline ObjShape rand_shape(Rng& rng) { return static_cast<ObjShape>(rng.next_below(kShapes)); }
inline Color rand_color(Rng& rng) { return static_cast<Color>(rng.next_below(kColors)); }
inline ObjSize rand_size(Rng& rng) { return static_cast<ObjSize>(rng.next_below(2)); }

inline std::vector<int> rand_cells(Rng& rng, int n) {
  std::vector<int> cells = {0, 1, 2, 3, 4, 5, 6, 7, 8};
  // Fisher-Yates prefix
  for (int i = 0; i < n; ++i) {
    int j = i + static_cast<int>(rng.next_below(kCells - i));
    std::swap(cells[i], cells[j]);
  }
  cells.resize(n);
  return cells;
}

}  // namespace detail

inline PromptSpec sample_prompt(PromptCategory cat, Rng& rng) {
  PromptSpec p;
  p.category = cat;
  p.shape_a = detail::rand_shape(rng);
  p.shape_b = detail::rand_shape(rng);
  p.color_a = detail::rand_color(rng);
  p.color_b = detail::rand_color(rng);
  p.count = 2 + static_cast<int>(rng.next_below(2));
  p.cell = static_cast<int>(rng.next_below(kCells));
  if (cat == PromptCategory::color_attr) {
    while (p.shape_b == p.shape_a) p.shape_b = detail::rand_shape(rng);
  }
  return p;
}

inline SceneSpec sample_scene(Rng& rng, int min_objects = 1, int max_objects = kMaxObjects) {
  int n = min_objects + static_cast<int>(rng.next_below(max_objects - min_objects + 1));
  auto cells = detail::rand_cells(rng, n);
  SceneSpec s;
  for (int i = 0; i < n; ++i)
    s.objects.push_back({detail::rand_shape(rng), detail::rand_color(rng), cells[i],
                         detail::rand_size(rng)});
  s.canonicalize();
  return s;
}

// A scene that satisfies the prompt; free attributes drawn at random.
inline SceneSpec sample_scene_for(const PromptSpec& p, Rng& rng) {
  SceneSpec s;
  switch (p.category) {
    case PromptCategory::single: {
      auto cells = detail::rand_cells(rng, 1);
      s.objects.push_back({p.shape_a, detail::rand_color(rng), cells[0], detail::rand_size(rng)});
      break;
    }
    case PromptCategory::two: {
      auto cells = detail::rand_cells(rng, 2);
      s.objects.push_back({p.shape_a, detail::rand_color(rng), cells[0], detail::rand_size(rng)});
      s.objects.push_back({p.shape_b, detail::rand_color(rng), cells[1], detail::rand_size(rng)});
      break;
    }
    case PromptCategory::counting: {
      auto cells = detail::rand_cells(rng, p.count);
      for (int i = 0; i < p.count; ++i)
        s.objects.push_back({p.shape_a, detail::rand_color(rng), cells[i], detail::rand_size(rng)});
      break;
    }
    case PromptCategory::colors: {
      auto cells = detail::rand_cells(rng, 1);
      s.objects.push_back({p.shape_a, p.color_a, cells[0], detail::rand_size(rng)});
      break;
    }
    case PromptCategory::position:
      s.objects.push_back({p.shape_a, detail::rand_color(rng), p.cell, detail::rand_size(rng)});
      break;
    case PromptCategory::color_attr: {
      auto cells = detail::rand_cells(rng, 2);
      s.objects.push_back({p.shape_a, p.color_a, cells[0], detail::rand_size(rng)});
      s.objects.push_back({p.shape_b, p.color_b, cells[1], detail::rand_size(rng)});
      break;
    }
  }
  s.canonicalize();
  return s;
}

struct GenevalScore {
  std::map<PromptCategory, double> accuracy;
  std::map<PromptCategory, int> totals;
  double overall = 0;
};

// Accuracy per category = fraction of images whose parse satisfies the
// prompt; flagged parses count as failures. Overall is the unweighted mean.
inline GenevalScore score_geneval_mini(const std::vector<PromptSpec>& prompts,
                                       const std::vector<Image>& images) {
  if (prompts.size() != images.size())
    throw ContractError("score_geneval_mini: prompt/image count mismatch");
  GenevalScore out;
  std::map<PromptCategory, int> hits;
  for (size_t i = 0; i < prompts.size(); ++i) {
    ++out.totals[prompts[i].category];
    auto parsed = parse_image(images[i]);
    if (!parsed.flagged && satisfies(prompts[i], parsed.scene)) ++hits[prompts[i].category];
  }
  double sum = 0;
  int cats = 0;
  for (auto& [cat, total] : out.totals) {
    double acc = total ? static_cast<double>(hits[cat]) / total : 0.0;
    out.accuracy[cat] = acc;
    sum += acc;
    ++cats;
  }
  out.overall = cats ? sum / cats : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Knowledge base
// ---------------------------------------------------------------------------

struct KbEntry {
  std::string name;
  ObjShape shape;
  Color color;
  int cell;
};

struct KnowledgeBase {
  std::vector<KbEntry> entries;

  static KnowledgeBase make(uint64_t seed) {
    KnowledgeBase kb;
    Rng rng(seed, 0x4b42);
    auto names = knowledge_names();
    for (const auto& n : names)
      kb.entries.push_back({n, detail::rand_shape(rng), detail::rand_color(rng),
                            static_cast<int>(rng.next_below(kCells))});
    return kb;
  }

  const KbEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }

  static SceneSpec target_scene(const KbEntry& e) {
    SceneSpec s;
    s.objects.push_back({e.shape, e.color, e.cell, ObjSize::large});
    return s;
  }

  static std::string prompt_text(const KbEntry& e) { return "the flag of " + e.name; }

  // "the flag of X is <object phrase>" - the suffix after "is" is exactly the
  // attribute phrase the reasoning pass is expected to surface.
  static std::string fact_text(const KbEntry& e) {
    SceneObject o{e.shape, e.color, e.cell, ObjSize::large};
    return prompt_text(e) + " is " + object_phrase(o);
  }
};

// ---------------------------------------------------------------------------
// Edit pairs
// ---------------------------------------------------------------------------

enum class EditKind : int { add = 0, remove, recolor, move, replace, identity };
constexpr int kEditKinds = 6;

inline const char* edit_kind_name(EditKind k) {
  static const char* n[] = {"add", "remove", "recolor", "move", "replace", "identity"};
  return n[static_cast<int>(k)];
}

struct EditPair {
  SceneSpec source;
  SceneSpec target;
  EditKind kind = EditKind::identity;
  std::string instruction;
};

namespace detail {

// The referenced (color, shape) must identify exactly one source object.
inline bool reference_unique(const SceneSpec& s, const SceneObject& o) {
  int n = 0;
  for (const auto& x : s.objects) n += (x.color == o.color && x.shape == o.shape);
  return n == 1;
}

}  // namespace detail

inline EditPair make_edit_pair(Rng& rng) {
  for (int attempt = 0; attempt < 256; ++attempt) {
    EditKind kind = static_cast<EditKind>(rng.next_below(kEditKinds));
    SceneSpec src = sample_scene(rng, 1, kMaxObjects);
    EditPair pair;
    pair.kind = kind;
    pair.source = src;
    pair.target = src;
    switch (kind) {
      case EditKind::identity:
        pair.instruction = "keep the image unchanged";
        return pair;
      case EditKind::add: {
        if (src.objects.size() >= kMaxObjects) continue;
        std::vector<int> free;
        for (int c = 0; c < kCells; ++c)
          if (!src.at_cell(c)) free.push_back(c);
        SceneObject o{detail::rand_shape(rng), detail::rand_color(rng),
                      free[rng.next_below(free.size())], detail::rand_size(rng)};
        pair.target.objects.push_back(o);
        pair.target.canonicalize();
        pair.instruction = "add a " + std::string(size_name(o.size)) + " " + color_name(o.color) +
                           " " + shape_name(o.shape) + " in the " + cell_name(o.cell);
        return pair;
      }
      case EditKind::remove: {
        size_t pick = rng.next_below(src.objects.size());
        const auto& o = src.objects[pick];
        if (!detail::reference_unique(src, o)) continue;
        pair.target.objects.erase(pair.target.objects.begin() + static_cast<long>(pick));
        pair.instruction =
            std::string("remove the ") + color_name(o.color) + " " + shape_name(o.shape);
        return pair;
      }
      case EditKind::recolor: {
        size_t pick = rng.next_below(src.objects.size());
        const auto& o = src.objects[pick];
        if (!detail::reference_unique(src, o)) continue;
        Color nc = detail::rand_color(rng);
        while (nc == o.color) nc = detail::rand_color(rng);
        pair.target.objects[pick].color = nc;
        pair.instruction = std::string("make the ") + color_name(o.color) + " " +
                           shape_name(o.shape) + " " + color_name(nc);
        return pair;
      }
      case EditKind::move: {
        size_t pick = rng.next_below(src.objects.size());
        const auto& o = src.objects[pick];
        if (!detail::reference_unique(src, o)) continue;
        std::vector<int> free;
        for (int c = 0; c < kCells; ++c)
          if (!src.at_cell(c)) free.push_back(c);
        if (free.empty()) continue;
        int dest = free[rng.next_below(free.size())];
        pair.target.objects[pick].cell = dest;
        pair.target.canonicalize();
        pair.instruction = std::string("move the ") + color_name(o.color) + " " +
                           shape_name(o.shape) + " to the " + cell_name(dest);
        return pair;
      }
      case EditKind::replace: {
        size_t pick = rng.next_below(src.objects.size());
        const auto& o = src.objects[pick];
        if (!detail::reference_unique(src, o)) continue;
        SceneObject n{detail::rand_shape(rng), detail::rand_color(rng), o.cell,
                      detail::rand_size(rng)};
        if (n.shape == o.shape && n.color == o.color) continue;
        pair.target.objects[pick] = n;
        pair.instruction = std::string("replace the ") + color_name(o.color) + " " +
                           shape_name(o.shape) + " with a " + size_name(n.size) + " " +
                           color_name(n.color) + " " + shape_name(n.shape);
        return pair;
      }
    }
  }
  throw ContractError("could not sample a consistent edit pair");
}

struct EditScore {
  double unedited_l1 = 0;
  bool correct = false;
};

// L1 over pixels outside the edited objects' cells, against the target
// render; correctness is an exact parse match with the target spec.
inline EditScore score_edit(const EditPair& pair, const Image& generated) {
  Image target = render(pair.target, generated.size);
  std::array<bool, kCells> edited{};
  for (int c = 0; c < kCells; ++c) {
    const SceneObject* a = pair.source.at_cell(c);
    const SceneObject* b = pair.target.at_cell(c);
    edited[static_cast<size_t>(c)] = (a == nullptr) != (b == nullptr) || (a && b && !(*a == *b));
  }
  int ext = detail::cell_extent(generated.size);
  auto cell_of_pixel = [&](int y, int x) -> int {
    for (int cell = 0; cell < kCells; ++cell) {
      int oy = detail::cell_origin(cell / 3, generated.size);
      int ox = detail::cell_origin(cell % 3, generated.size);
      if (y >= oy && y < oy + ext && x >= ox && x < ox + ext) return cell;
    }
    return -1;
  };
  double total = 0;
  long long count = 0;
  for (int y = 0; y < generated.size; ++y)
    for (int x = 0; x < generated.size; ++x) {
      int cell = cell_of_pixel(y, x);
      if (cell >= 0 && edited[static_cast<size_t>(cell)]) continue;
      for (int ch = 0; ch < 3; ++ch)
        total += std::abs(generated.px(y, x)[ch] - target.px(y, x)[ch]);
      count += 3;
    }
  EditScore out;
  out.unedited_l1 = count ? total / static_cast<double>(count) : 0.0;
  auto parsed = parse_image(generated);
  out.correct = !parsed.flagged && parsed.scene == pair.target;
  return out;
}

// ---------------------------------------------------------------------------
// PPM I/O (P6, 8-bit) and pixel utilities
// ---------------------------------------------------------------------------

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IntegrityError("cannot open for write: " + path);
  f << "P6\n" << img.size << " " << img.size << "\n255\n";
  for (float v : img.rgb) {
    float c = std::clamp(v, 0.f, 1.f);
    f.put(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.f))));
  }
}

inline Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IntegrityError("cannot open for read: " + path);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  f >> magic >> w >> h >> maxv;
  if (magic != "P6" || maxv != 255 || w != h || (w != 16 && w != 32))
    throw IntegrityError("unsupported ppm: " + path);
  f.get();  // single whitespace after header
  Image img;
  img.size = w;
  img.rgb.resize(static_cast<size_t>(w) * h * 3);
  std::vector<unsigned char> raw(img.rgb.size());
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw IntegrityError("truncated ppm: " + path);
  for (size_t i = 0; i < raw.size(); ++i) img.rgb[i] = static_cast<float>(raw[i]) / 255.f;
  return img;
}

inline Image box_blur3(const Image& img) {
  Image out = img;
  for (int y = 0; y < img.size; ++y)
    for (int x = 0; x < img.size; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        float acc = 0;
        int n = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            int yy = y + dy, xx = x + dx;
            if (yy < 0 || yy >= img.size || xx < 0 || xx >= img.size) continue;
            acc += img.px(yy, xx)[ch];
            ++n;
          }
        out.px(y, x)[ch] = acc / static_cast<float>(n);
      }
  return out;
}

inline Image upsample2(const Image& img) {
  Image out;
  out.size = img.size * 2;
  out.rgb.resize(static_cast<size_t>(out.size) * out.size * 3);
  for (int y = 0; y < out.size; ++y)
    for (int x = 0; x < out.size; ++x)
      std::copy_n(img.px(y / 2, x / 2), 3, out.px(y, x));
  return out;
}

// ---------------------------------------------------------------------------
// Corpus (index-sharded seeding; sample i depends only on (seed, i))
// ---------------------------------------------------------------------------

struct GenSample {
  SceneSpec scene;
  bool is_caption = false;  // full canonical caption vs category prompt
  PromptCategory category = PromptCategory::single;
  std::string prompt;
};

inline GenSample gen_sample(uint64_t corpus_seed, uint64_t index) {
  Rng rng(corpus_seed, index);
  GenSample s;
  if (rng.next_unit() < 0.4) {
    s.is_caption = true;
    s.scene = sample_scene(rng, 1, kMaxObjects);
    s.prompt = caption(s.scene);
  } else {
    s.category = static_cast<PromptCategory>(rng.next_below(kPromptCategories));
    PromptSpec p = sample_prompt(s.category, rng);
    s.scene = sample_scene_for(p, rng);
    s.prompt = prompt_text(p);
  }
  return s;
}

inline EditPair edit_sample(uint64_t corpus_seed, uint64_t index) {
  Rng rng(corpus_seed ^ 0x5eedED17ULL, index);
  return make_edit_pair(rng);
}

inline PromptSpec suite_prompt(uint64_t suite_seed, uint64_t index) {
  Rng rng(suite_seed, index);
  auto cat = static_cast<PromptCategory>(rng.next_below(kPromptCategories));
  return sample_prompt(cat, rng);
}

}  // namespace star::world
