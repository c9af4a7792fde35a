#pragma once

#include "gxn/random.hpp"
#include "gxn/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace gxn::data {

using TokenId = std::size_t;
using TokenSeq = std::vector<TokenId>;
using Words = std::vector<std::string>;

enum class ShapeKind { circle, square, triangle, cross };
enum class Color { red, green, blue, yellow };
enum class Size { small, large };

inline constexpr std::size_t grid_cells = 9;         // 3 x 3 layout
inline constexpr std::size_t background_shades = 4;
inline constexpr std::size_t max_objects = 3;
inline constexpr std::size_t captions_per_image = 5;
inline constexpr std::size_t image_size = 64;

struct SceneObject {
  ShapeKind shape = ShapeKind::circle;
  Color color = Color::red;
  Size size = Size::large;
  std::size_t cell = 0;  // row * 3 + col

  auto operator<=>(const SceneObject&) const = default;
};

struct SceneSpec {
  std::vector<SceneObject> objects;  // kept in cell order
  std::size_t background = 0;

  auto operator<=>(const SceneSpec&) const = default;
};

const char* name(ShapeKind s);
const char* name(Color c);

void validate(const SceneSpec& scene);

/// "bg=2;L-red-circle@0,0;S-blue-cross@1,2"
std::string encode_scene(const SceneSpec& scene);
SceneSpec decode_scene(const std::string& text);

/// 1..3 objects with distinct cells and distinct (size, color, shape).
SceneSpec sample_scene(Rng& rng);

/// What the captions pin down: attributes and cell for a single object,
/// the attribute set otherwise. Two scenes with equal keys are
/// indistinguishable from their captions.
std::string caption_signature(const SceneSpec& scene);

/// Number of distinct caption signatures the sampler can produce.
std::size_t signature_capacity();

/// Packed 8-bit RGB images, row-major HWC.
struct Image {
  std::size_t height = image_size, width = image_size;
  std::vector<std::uint8_t> rgb;
};

/// Deterministic rasterization; pixel byte p stands for 2 p / 255 - 1.
Image render(const SceneSpec& scene);
/// [1, H, W, 3] in [-1, 1].
Tensor to_tensor(const Image& image);
Image from_tensor(const Tensor& image);  // accepts [H, W, 3] or [1, H, W, 3]

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Five distinct lowercase template captions naming every object's color and shape.
std::vector<Words> describe(const SceneSpec& scene, Rng& rng);

Words split_words(const std::string& text);
std::string join_words(const Words& words);

class Vocabulary {
 public:
  static constexpr TokenId pad = 0, bos = 1, eos = 2, unk = 3;

  Vocabulary();
  static Vocabulary build(const std::vector<std::vector<Words>>& captions);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(const std::string& token) const;
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  TokenSeq encode(const Words& words) const;
  /// Stops at eos; skips pad and bos.
  Words decode(const TokenSeq& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, TokenId> ids_;
};

struct DataItem {
  std::string id;
  SceneSpec scene;
  std::string image_file;  // relative to the dataset root
  std::vector<Words> captions;
};

struct DatasetSplit {
  std::string tag;
  std::vector<DataItem> items;
};

struct Dataset {
  DatasetSplit train, val, test;
  Vocabulary vocab;

  const DatasetSplit& split(const std::string& tag) const;
};

/// Disjoint, caption-distinguishable scenes; vocabulary from train captions.
Dataset build_dataset(std::size_t n_train, std::size_t n_val, std::size_t n_test, std::uint64_t seed);

/// Writes <split>.tsv manifests, images/<id>.ppm and vocab.txt under `root`.
void write_dataset(const Dataset& dataset, const std::filesystem::path& root);
Dataset load_dataset(const std::filesystem::path& root);

/// Split images decoded into memory, one 64 x 64 x 3 block per item.
class ImageBank {
 public:
  ImageBank() = default;
  static ImageBank load(const DatasetSplit& split, const std::filesystem::path& root);
  static ImageBank render_split(const DatasetSplit& split);

  std::size_t size() const { return count_; }
  /// [indices.size(), 64, 64, 3] in [-1, 1].
  Tensor batch(std::span<const std::size_t> indices) const;
  Tensor all() const;

 private:
  std::size_t count_ = 0;
  std::vector<std::uint8_t> bytes_;
};

}  // namespace gxn::data
