#include "gxn/shapes.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace gxn::data {

namespace {

constexpr std::array<const char*, 4> shape_names{"circle", "square", "triangle", "cross"};
constexpr std::array<const char*, 4> color_names{"red", "green", "blue", "yellow"};
constexpr std::array<double, background_shades> shade_levels{-0.6, -0.2, 0.2, 0.6};
constexpr std::array<std::array<double, 3>, 4> color_rgb{{{1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}, {1, 1, -1}}};

template <typename Enum, std::size_t N>
Enum parse_enum(const std::array<const char*, N>& names, const std::string& word) {
  for (std::size_t i = 0; i < N; ++i) {
    if (word == names[i]) return static_cast<Enum>(i);
  }
  throw std::invalid_argument("unknown scene attribute '" + word + "'");
}

auto attributes(const SceneObject& o) { return std::tuple(o.size, o.color, o.shape); }

std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(255.0 * (std::clamp(v, -1.0, 1.0) + 1.0) / 2.0)); }

bool covers(const SceneObject& o, double px, double py) {
  const double cell = static_cast<double>(image_size) / 3.0;
  const double cx = (static_cast<double>(o.cell % 3) + 0.5) * cell;
  const double cy = (static_cast<double>(o.cell / 3) + 0.5) * cell;
  const double r = o.size == Size::large ? 9.0 : 5.0;
  const double dx = px - cx, dy = py - cy;
  switch (o.shape) {
    case ShapeKind::circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::triangle: return dy >= -r && dy <= 0.8 * r && std::abs(dx) <= (dy + r) / 1.8;
    case ShapeKind::cross:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
  }
  return false;
}

}  // namespace

const char* name(ShapeKind s) { return shape_names[static_cast<std::size_t>(s)]; }
const char* name(Color c) { return color_names[static_cast<std::size_t>(c)]; }

void validate(const SceneSpec& scene) {
  if (scene.objects.size() > max_objects) throw std::invalid_argument("scene has more than 3 objects");
  if (scene.background >= background_shades) throw std::invalid_argument("background shade out of range");
  std::set<std::size_t> cells;
  for (const auto& o : scene.objects) {
    if (o.cell >= grid_cells) throw std::invalid_argument("object cell out of range");
    if (!cells.insert(o.cell).second) throw std::invalid_argument("two objects share a cell");
  }
}

std::string encode_scene(const SceneSpec& scene) {
  std::string out = "bg=" + std::to_string(scene.background);
  for (const auto& o : scene.objects) {
    out += ';';
    out += o.size == Size::large ? 'L' : 'S';
    out += std::string("-") + name(o.color) + "-" + name(o.shape) + "@" + std::to_string(o.cell / 3) + "," + std::to_string(o.cell % 3);
  }
  return out;
}

SceneSpec decode_scene(const std::string& text) {
  SceneSpec scene;
  std::istringstream is(text);
  std::string part;
  if (!std::getline(is, part, ';') || part.rfind("bg=", 0) != 0) throw std::invalid_argument("scene encoding must start with bg=: " + text);
  scene.background = std::stoul(part.substr(3));
  while (std::getline(is, part, ';')) {
    const auto d1 = part.find('-'), d2 = part.find('-', d1 + 1), at = part.find('@'), comma = part.find(',', at);
    if (d1 != 1 || d2 == std::string::npos || at == std::string::npos || comma == std::string::npos || (part[0] != 'L' && part[0] != 'S')) {
      throw std::invalid_argument("malformed scene object '" + part + "'");
    }
    SceneObject o;
    o.size = part[0] == 'L' ? Size::large : Size::small;
    o.color = parse_enum<Color>(color_names, part.substr(d1 + 1, d2 - d1 - 1));
    o.shape = parse_enum<ShapeKind>(shape_names, part.substr(d2 + 1, at - d2 - 1));
    const auto row = std::stoul(part.substr(at + 1, comma - at - 1)), col = std::stoul(part.substr(comma + 1));
    if (row >= 3 || col >= 3) throw std::invalid_argument("scene cell out of range in '" + part + "'");
    o.cell = row * 3 + col;
    scene.objects.push_back(o);
  }
  validate(scene);
  return scene;
}

SceneSpec sample_scene(Rng& rng) {
  SceneSpec scene;
  const auto count = 1 + uniform_index(rng, max_objects);
  std::array<std::size_t, grid_cells> cells{0, 1, 2, 3, 4, 5, 6, 7, 8};
  shuffle(std::span<std::size_t>(cells), rng);
  while (scene.objects.size() < count) {
    SceneObject o;
    o.shape = static_cast<ShapeKind>(uniform_index(rng, 4));
    o.color = static_cast<Color>(uniform_index(rng, 4));
    o.size = static_cast<Size>(uniform_index(rng, 2));
    o.cell = cells[scene.objects.size()];
    const bool repeat = std::any_of(scene.objects.begin(), scene.objects.end(), [&](const SceneObject& p) { return attributes(p) == attributes(o); });
    if (!repeat) scene.objects.push_back(o);
  }
  scene.background = uniform_index(rng, background_shades);
  std::sort(scene.objects.begin(), scene.objects.end(), [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
  return scene;
}

std::string caption_signature(const SceneSpec& scene) {
  if (scene.objects.size() == 1) {
    const auto& o = scene.objects.front();
    return std::to_string(static_cast<int>(o.size)) + name(o.color) + name(o.shape) + "@" + std::to_string(o.cell);
  }
  std::vector<std::string> parts;
  for (const auto& o : scene.objects) parts.push_back(std::to_string(static_cast<int>(o.size)) + name(o.color) + name(o.shape));
  std::sort(parts.begin(), parts.end());
  std::string out;
  for (const auto& p : parts) out += p + "|";
  return out;
}

std::size_t signature_capacity() {
  const std::size_t kinds = 2 * 4 * 4;
  return kinds * grid_cells + kinds * (kinds - 1) / 2 + kinds * (kinds - 1) * (kinds - 2) / 6;
}

// ---------------------------------------------------------------------------

Image render(const SceneSpec& scene) {
  validate(scene);
  Image img;
  img.rgb.assign(image_size * image_size * 3, to_byte(shade_levels[scene.background]));
  for (std::size_t y = 0; y < image_size; ++y) {
    for (std::size_t x = 0; x < image_size; ++x) {
      for (const auto& o : scene.objects) {
        if (!covers(o, static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5)) continue;
        const auto& rgb = color_rgb[static_cast<std::size_t>(o.color)];
        for (std::size_t c = 0; c < 3; ++c) img.rgb[(y * image_size + x) * 3 + c] = to_byte(rgb[c]);
      }
    }
  }
  return img;
}

Tensor to_tensor(const Image& image) {
  Tensor::Vector v(static_cast<Eigen::Index>(image.rgb.size()));
  for (std::size_t i = 0; i < image.rgb.size(); ++i) v[static_cast<Eigen::Index>(i)] = 2.0 * image.rgb[i] / 255.0 - 1.0;
  return Tensor::constant({1, image.height, image.width, 3}, std::move(v));
}

Image from_tensor(const Tensor& image) {
  const auto& s = image.shape();
  const bool batched = s.size() == 4 && s[0] == 1;
  if (!(batched || s.size() == 3) || s.back() != 3) throw ShapeError("image tensor must be [H, W, 3], got " + to_string(s));
  Image img;
  img.height = s[s.size() - 3];
  img.width = s[s.size() - 2];
  img.rgb.resize(image.size());
  for (std::size_t i = 0; i < image.size(); ++i) img.rgb[i] = to_byte(image.values()[static_cast<Eigen::Index>(i)]);
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  auto next = [&] {
    std::string tok;
    while (is >> tok) {
      if (tok[0] != '#') return tok;
      std::string rest;
      std::getline(is, rest);
    }
    throw std::runtime_error("truncated pixmap header in " + path.string());
  };
  if (next() != "P6") throw std::runtime_error(path.string() + " is not a binary pixmap");
  Image img;
  img.width = std::stoul(next());
  img.height = std::stoul(next());
  if (next() != "255") throw std::runtime_error(path.string() + ": only 8-bit pixmaps are supported");
  is.get();
  img.rgb.resize(img.width * img.height * 3);
  if (!is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()))) {
    throw std::runtime_error("truncated pixel data in " + path.string());
  }
  return img;
}

// ---------------------------------------------------------------------------

namespace {

std::string position_phrase(std::size_t cell) {
  static constexpr std::array<const char*, 3> rows{"top", "middle", "bottom"};
  static constexpr std::array<const char*, 3> cols{"left", "center", "right"};
  if (cell == 4) return "center";
  return std::string(rows[cell / 3]) + " " + cols[cell % 3];
}

std::string object_phrase(const SceneObject& o, Rng& rng) {
  const bool alt = uniform_index(rng, 2) == 1;
  const char* size = o.size == Size::large ? (alt ? "big" : "large") : (alt ? "little" : "small");
  return std::string(size) + " " + name(o.color) + " " + name(o.shape);
}

std::string single_caption(std::size_t tmpl, const std::string& obj, const std::string& pos) {
  switch (tmpl) {
    case 0: return "a " + obj + " in the " + pos;
    case 1: return "the " + pos + " has a " + obj;
    case 2: return "there is a " + obj + " at the " + pos;
    case 3: return "in the " + pos + " is a " + obj;
    case 4: return "a " + obj + " at the " + pos;
    default: return obj + " in the " + pos;
  }
}

std::string pair_caption(std::size_t tmpl, const std::string& a, const std::string& b) {
  switch (tmpl) {
    case 0: return "a " + a + " and a " + b;
    case 1: return a + " with " + b;
    case 2: return a + " next to " + b;
    case 3: return "there is a " + a + " and a " + b;
    case 4: return "a " + b + " and a " + a;
    default: return b + " with " + a;
  }
}

std::string triple_caption(std::size_t tmpl, const std::string& a, const std::string& b, const std::string& c) {
  switch (tmpl) {
    case 0: return a + " , " + b + " and " + c;
    case 1: return a + " with " + b + " and " + c;
    case 2: return a + " next to " + b + " and " + c;
    case 3: return c + " , " + a + " and " + b;
    case 4: return b + " and " + c + " with " + a;
    default: return c + " with " + b + " and " + a;
  }
}

}  // namespace

std::vector<Words> describe(const SceneSpec& scene, Rng& rng) {
  validate(scene);
  if (scene.objects.empty()) throw std::invalid_argument("cannot describe an empty scene");
  std::array<std::size_t, 6> templates{0, 1, 2, 3, 4, 5};
  shuffle(std::span<std::size_t>(templates), rng);
  std::vector<Words> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; out.size() < captions_per_image; ++i) {
    const auto tmpl = templates[i % templates.size()];
    std::vector<std::string> objs;
    for (const auto& o : scene.objects) objs.push_back(object_phrase(o, rng));
    std::string text;
    switch (objs.size()) {
      case 1: text = single_caption(tmpl, objs[0], position_phrase(scene.objects[0].cell)); break;
      case 2: text = pair_caption(tmpl, objs[0], objs[1]); break;
      default: text = triple_caption(tmpl, objs[0], objs[1], objs[2]); break;
    }
    if (seen.insert(text).second) out.push_back(split_words(text));
  }
  return out;
}

Words split_words(const std::string& text) {
  Words out;
  std::istringstream is(text);
  for (std::string w; is >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(w));
  }
  return out;
}

std::string join_words(const Words& words) {
  std::string out;
  for (std::size_t i = 0; i < words.size(); ++i) out += (i ? " " : "") + words[i];
  return out;
}

// ---------------------------------------------------------------------------

namespace {
const std::array<std::string, 4> specials{"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocabulary::Vocabulary() : tokens_(specials.begin(), specials.end()) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) ids_[tokens_[i]] = i;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  for (std::size_t i = 0; i < specials.size(); ++i) {
    if (tokens.size() <= i || tokens[i] != specials[i]) throw std::invalid_argument("vocabulary must start with <pad> <bos> <eos> <unk>");
  }
  for (auto& t : tokens) {
    if (!v.ids_.emplace(t, v.tokens_.size()).second) throw std::invalid_argument("duplicate vocabulary token '" + t + "'");
    v.tokens_.push_back(std::move(t));
  }
  return v;
}

Vocabulary Vocabulary::build(const std::vector<std::vector<Words>>& captions) {
  std::set<std::string> words;
  for (const auto& caps : captions) {
    for (const auto& c : caps) words.insert(c.begin(), c.end());
  }
  std::vector<std::string> tokens{"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& w : words) {
    if (std::find(tokens.begin(), tokens.end(), w) == tokens.end()) tokens.push_back(w);
  }
  return from_tokens(std::move(tokens));
}

TokenId Vocabulary::id(const std::string& token) const {
  const auto it = ids_.find(token);
  return it == ids_.end() ? unk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

TokenSeq Vocabulary::encode(const Words& words) const {
  TokenSeq out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(id(w));
  return out;
}

Words Vocabulary::decode(const TokenSeq& ids) const {
  Words out;
  for (auto id : ids) {
    if (id == eos) break;
    if (id == pad || id == bos) continue;
    out.push_back(token(id));
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : tokens_) os << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> tokens;
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

// ---------------------------------------------------------------------------

const DatasetSplit& Dataset::split(const std::string& tag) const {
  if (tag == "train") return train;
  if (tag == "val") return val;
  if (tag == "test") return test;
  throw std::invalid_argument("unknown split '" + tag + "' (expected train, val or test)");
}

Dataset build_dataset(std::size_t n_train, std::size_t n_val, std::size_t n_test, std::uint64_t seed) {
  if (n_train == 0 || n_val == 0 || n_test == 0) throw std::invalid_argument("every split needs at least one item");
  const auto total = n_train + n_val + n_test;
  if (total > signature_capacity()) {
    throw std::invalid_argument("requested " + std::to_string(total) + " scenes but only " + std::to_string(signature_capacity()) +
                                " are distinguishable by their captions");
  }
  Dataset ds;
  ds.train.tag = "train";
  ds.val.tag = "val";
  ds.test.tag = "test";
  std::set<std::string> used;
  const std::uint64_t max_attempts = 1000 * static_cast<std::uint64_t>(total) + 100000;
  std::size_t accepted = 0;
  for (std::uint64_t attempt = 0; accepted < total; ++attempt) {
    if (attempt == max_attempts) throw std::runtime_error("could not draw enough distinct scenes");
    Rng rng(derive_seed(seed, attempt));
    auto scene = sample_scene(rng);
    if (!used.insert(caption_signature(scene)).second) continue;
    auto& split = accepted < n_train ? ds.train : accepted < n_train + n_val ? ds.val : ds.test;
    char id[32];
    std::snprintf(id, sizeof id, "%s_%05zu", split.tag.c_str(), split.items.size());
    DataItem item{id, std::move(scene), std::string("images/") + id + ".ppm", {}};
    item.captions = describe(item.scene, rng);
    split.items.push_back(std::move(item));
    ++accepted;
  }
  std::vector<std::vector<Words>> train_caps;
  for (const auto& item : ds.train.items) train_caps.push_back(item.captions);
  ds.vocab = Vocabulary::build(train_caps);
  return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& root) {
  std::filesystem::create_directories(root / "images");
  for (const auto* split : {&dataset.train, &dataset.val, &dataset.test}) {
    std::ofstream os(root / (split->tag + ".tsv"), std::ios::binary);
    if (!os) throw std::runtime_error("cannot write manifest in " + root.string());
    for (const auto& item : split->items) {
      os << item.id << '\t' << encode_scene(item.scene) << '\t' << item.image_file;
      for (const auto& c : item.captions) os << '\t' << join_words(c);
      os << '\n';
      write_ppm(root / item.image_file, render(item.scene));
    }
  }
  dataset.vocab.save(root / "vocab.txt");
}

Dataset load_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw std::runtime_error("dataset directory " + root.string() + " does not exist");
  Dataset ds;
  ds.vocab = Vocabulary::load(root / "vocab.txt");
  for (auto* split : {&ds.train, &ds.val, &ds.test}) {
    split->tag = split == &ds.train ? "train" : split == &ds.val ? "val" : "test";
    const auto path = root / (split->tag + ".tsv");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("missing manifest " + path.string());
    std::size_t line_no = 0;
    for (std::string line; std::getline(is, line);) {
      ++line_no;
      if (line.empty()) continue;
      std::vector<std::string> fields;
      std::istringstream ls(line);
      for (std::string f; std::getline(ls, f, '\t');) fields.push_back(f);
      if (fields.size() != 3 + captions_per_image) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " + std::to_string(3 + captions_per_image) +
                                 " fields, found " + std::to_string(fields.size()));
      }
      DataItem item{fields[0], decode_scene(fields[1]), fields[2], {}};
      for (std::size_t c = 0; c < captions_per_image; ++c) item.captions.push_back(split_words(fields[3 + c]));
      split->items.push_back(std::move(item));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------

ImageBank ImageBank::load(const DatasetSplit& split, const std::filesystem::path& root) {
  ImageBank bank;
  bank.count_ = split.items.size();
  bank.bytes_.reserve(bank.count_ * image_size * image_size * 3);
  for (const auto& item : split.items) {
    const auto img = read_ppm(root / item.image_file);
    if (img.width != image_size || img.height != image_size) throw std::runtime_error(item.image_file + " is not 64 x 64");
    bank.bytes_.insert(bank.bytes_.end(), img.rgb.begin(), img.rgb.end());
  }
  return bank;
}

ImageBank ImageBank::render_split(const DatasetSplit& split) {
  ImageBank bank;
  bank.count_ = split.items.size();
  for (const auto& item : split.items) {
    const auto img = render(item.scene);
    bank.bytes_.insert(bank.bytes_.end(), img.rgb.begin(), img.rgb.end());
  }
  return bank;
}

Tensor ImageBank::batch(std::span<const std::size_t> indices) const {
  constexpr std::size_t block = image_size * image_size * 3;
  Tensor::Vector v(static_cast<Eigen::Index>(indices.size() * block));
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= count_) throw std::out_of_range("image index out of range");
    const auto* src = bytes_.data() + indices[b] * block;
    for (std::size_t i = 0; i < block; ++i) v[static_cast<Eigen::Index>(b * block + i)] = 2.0 * src[i] / 255.0 - 1.0;
  }
  return Tensor::constant({indices.size(), image_size, image_size, 3}, std::move(v));
}

Tensor ImageBank::all() const {
  std::vector<std::size_t> idx(count_);
  for (std::size_t i = 0; i < count_; ++i) idx[i] = i;
  return batch(idx);
}

}  // namespace gxn::data
