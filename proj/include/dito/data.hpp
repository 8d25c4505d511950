#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dito/box.hpp"
#include "dito/tensor.hpp"

namespace dito::data {

// 8-bit RGB raster, row-major, interleaved channels.
struct Image {
    int height = 0;
    int width = 0;
    std::vector<std::uint8_t> rgb;

    std::uint8_t* pixel(int y, int x) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
    const std::uint8_t* pixel(int y, int x) const {
        return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
    }
};

void write_png(const std::filesystem::path& path, const Image& image);
// Grayscale PNG; values are clamped to [0, 1] and scaled to 0..255.
void write_gray_png(const std::filesystem::path& path, int height, int width, const std::vector<double>& values);
Image read_png(const std::filesystem::path& path);

struct Annotation {
    NormBox box;
    std::string category;  // "<color> <shape>"
};

struct DatasetRecord {
    std::string image_path;  // relative to the manifest directory
    std::string caption;
    std::vector<Annotation> annotations;
};

enum class Split { Pretrain, Finetune, Eval };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct SyntheticSpec {
    std::uint64_t seed = 0;
    int image_size = 64;
    int num_images = 200;
    std::vector<std::string> colors{"red", "green", "blue"};
    std::vector<std::string> shapes{"circle", "square", "triangle", "cross"};
    std::vector<std::string> novel_names{"green circle", "green square", "blue triangle", "red cross"};
    int objects_min = 1;
    int objects_max = 3;
    int size_min = 12;  // object side in pixels
    int size_max = 26;
    int caption_grammar = 0;
    Split split = Split::Eval;

    std::vector<std::string> category_names() const;
    std::vector<std::string> base_names() const;
    bool is_novel(const std::string& name) const;
    // Categories that may be placed in this split (finetune: base only).
    std::vector<std::string> placeable() const;
    void validate() const;
};

// Caption templates with a "{}" slot for the object list.
const std::vector<std::string>& caption_templates();
// Category prompt templates ("{}" = category name).
std::vector<std::string> prompt_templates();
// Every word that can appear in captions or prompts of the spec.
std::vector<std::string> vocabulary_words(const SyntheticSpec& spec);

struct Sample {
    DatasetRecord record;
    Image image;
};

// Renders one image from the spec's seed stream; the category sequence comes
// from a balanced round-robin plan so per-category counts differ by at most
// one across the split.
std::vector<Sample> generate(const SyntheticSpec& spec);

// Writes images/<index>.png and manifest.tsv under out_dir.
std::vector<DatasetRecord> gen_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir);

// Tab-separated: path, caption, then "x0,y0,x1,y1,category" groups.
void write_manifest(const std::filesystem::path& path, const std::vector<DatasetRecord>& records);
std::vector<DatasetRecord> read_manifest(const std::filesystem::path& path);
// Shortest text that parses back to the same double.
std::string format_number(double v);

// A split loaded into memory.
struct Dataset {
    std::vector<DatasetRecord> records;
    std::vector<Image> images;

    int size() const { return static_cast<int>(records.size()); }
    static Dataset load(const std::filesystem::path& dir);
    // Normalized (n, H, W, 3) tensor for the given rows: (v / 255 - 0.5) / 0.5.
    Tensor batch(const std::vector<int>& rows) const;
};

Tensor image_tensor(const std::vector<const Image*>& images);

}  // namespace dito::data
