#include "dito/data.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dito/nn.hpp"
#include "dito/text.hpp"

namespace dito::data {

namespace fs = std::filesystem;

void write_png(const fs::path& path, const Image& image) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, image.rgb.data(), 0, nullptr)) {
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + img.message);
    }
}

void write_gray_png(const fs::path& path, int height, int width, const std::vector<double>& values) {
    if (values.size() != static_cast<std::size_t>(height) * width) throw std::invalid_argument("write_gray_png: size mismatch");
    std::vector<std::uint8_t> px(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        px[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255.0));
    }
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(width);
    img.height = static_cast<png_uint_32>(height);
    img.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.string().c_str(), 0, px.data(), 0, nullptr)) {
        throw std::runtime_error("cannot write PNG " + path.string() + ": " + img.message);
    }
}

Image read_png(const fs::path& path) {
    png_image img{};
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.string().c_str())) {
        throw std::runtime_error("cannot read PNG " + path.string() + ": " + img.message);
    }
    img.format = PNG_FORMAT_RGB;
    Image out;
    out.width = static_cast<int>(img.width);
    out.height = static_cast<int>(img.height);
    out.rgb.resize(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
        throw std::runtime_error("cannot decode PNG " + path.string() + ": " + img.message);
    }
    return out;
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Pretrain: return "pretrain";
        case Split::Finetune: return "finetune";
        case Split::Eval: return "eval";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "pretrain") return Split::Pretrain;
    if (s == "finetune") return Split::Finetune;
    if (s == "eval") return Split::Eval;
    throw std::invalid_argument("unknown split '" + s + "' (expected pretrain, finetune or eval)");
}

std::vector<std::string> SyntheticSpec::category_names() const {
    std::vector<std::string> out;
    for (const auto& c : colors)
        for (const auto& s : shapes) out.push_back(c + " " + s);
    return out;
}

std::vector<std::string> SyntheticSpec::base_names() const {
    std::vector<std::string> out;
    for (const auto& n : category_names())
        if (!is_novel(n)) out.push_back(n);
    return out;
}

bool SyntheticSpec::is_novel(const std::string& name) const {
    return std::find(novel_names.begin(), novel_names.end(), name) != novel_names.end();
}

std::vector<std::string> SyntheticSpec::placeable() const {
    return split == Split::Finetune ? base_names() : category_names();
}

void SyntheticSpec::validate() const {
    static const std::set<std::string> known_colors{"red", "green", "blue", "yellow", "magenta", "cyan"};
    static const std::set<std::string> known_shapes{"circle", "square", "triangle", "cross"};
    for (const auto& c : colors)
        if (!known_colors.count(c)) throw std::invalid_argument("data: unknown color '" + c + "'");
    for (const auto& s : shapes)
        if (!known_shapes.count(s)) throw std::invalid_argument("data: unknown shape '" + s + "'");
    const auto all = category_names();
    for (const auto& n : novel_names) {
        if (std::find(all.begin(), all.end(), n) == all.end()) {
            throw std::invalid_argument("data: novel category '" + n + "' is not a color/shape pair");
        }
    }
    if (base_names().empty()) throw std::invalid_argument("data: no base categories");
    if (image_size < 32) throw std::invalid_argument("data: image_size must be at least 32");
    if (num_images < 0) throw std::invalid_argument("data: num_images must be non-negative");
    if (objects_min < 1 || objects_max < objects_min || objects_max > 4) {
        throw std::invalid_argument("data: objects per image must satisfy 1 <= min <= max <= 4");
    }
    if (size_min < 6 || size_max < size_min || size_max > image_size / 2) {
        throw std::invalid_argument("data: object size range must satisfy 6 <= min <= max <= image_size/2");
    }
    if (caption_grammar != 0) throw std::invalid_argument("data: only caption grammar 0 is defined");
}

const std::vector<std::string>& caption_templates() {
    static const std::vector<std::string> t{
        "a photo of {}",          "an image with {}",       "there is {}",
        "a picture showing {}",   "{} on a textured background", "a rendering of {}",
    };
    return t;
}

std::vector<std::string> prompt_templates() {
    std::vector<std::string> out;
    for (const auto& t : caption_templates()) {
        std::string s = t;
        s.replace(s.find("{}"), 2, "a {}");
        out.push_back(s);
    }
    return out;
}

std::vector<std::string> vocabulary_words(const SyntheticSpec& spec) {
    std::set<std::string> words{"a", "and"};
    for (const auto& t : caption_templates())
        for (const auto& w : text::split_words(t))
            if (w != "{}") words.insert(w);
    for (const auto& c : spec.colors) words.insert(c);
    for (const auto& s : spec.shapes) words.insert(s);
    return {words.begin(), words.end()};
}

namespace {

struct Rgb {
    int r, g, b;
};

Rgb base_color(const std::string& c) {
    if (c == "red") return {215, 45, 40};
    if (c == "green") return {45, 185, 60};
    if (c == "blue") return {50, 80, 220};
    if (c == "yellow") return {225, 210, 40};
    if (c == "magenta") return {200, 50, 200};
    return {40, 200, 210};
}

bool inside_shape(const std::string& shape, double u, double v, double x0, double y0, double s) {
    const double cx = x0 + s / 2, cy = y0 + s / 2;
    if (shape == "square") return true;
    if (shape == "circle") return (u - cx) * (u - cx) + (v - cy) * (v - cy) <= (s / 2) * (s / 2);
    if (shape == "triangle") {
        const double t = (v - y0) / s;
        return std::abs(u - cx) <= t * s / 2;
    }
    const double arm = std::max(2.0, std::round(s / 3.0)) / 2;  // cross
    return std::abs(u - cx) <= arm || std::abs(v - cy) <= arm;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a * 0x9E3779B97F4A7C15ULL + b + 0x632BE59BD9B4E019ULL;
    x ^= x >> 31;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    return x;
}

struct Placed {
    int x0, y0, size;
    std::string color, shape;
};

Sample render(const SyntheticSpec& spec, int index, const std::vector<std::string>& categories) {
    const int W = spec.image_size;
    Rng rng(mix(mix(spec.seed, static_cast<std::uint64_t>(spec.split)), static_cast<std::uint64_t>(index)));
    Sample out;
    Image& img = out.image;
    img.width = img.height = W;
    img.rgb.assign(static_cast<std::size_t>(W) * W * 3, 0);

    // Textured gray background: coarse blocks plus per-pixel noise.
    const int gray = rng.uniform_int(70, 150);
    const int block = 4;
    const int nb = (W + block - 1) / block;
    std::vector<int> coarse(static_cast<std::size_t>(nb) * nb);
    for (int& c : coarse) c = rng.uniform_int(-18, 18);
    for (int y = 0; y < W; ++y) {
        for (int x = 0; x < W; ++x) {
            const int v = std::clamp(gray + coarse[(y / block) * nb + x / block] + rng.uniform_int(-8, 8), 0, 255);
            auto* p = img.pixel(y, x);
            p[0] = p[1] = p[2] = static_cast<std::uint8_t>(v);
        }
    }

    std::vector<Placed> placed;
    for (const auto& cat : categories) {
        const auto sp = cat.find(' ');
        Placed obj{0, 0, rng.uniform_int(spec.size_min, spec.size_max), cat.substr(0, sp), cat.substr(sp + 1)};
        bool ok = false;
        while (!ok) {
            for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
                obj.x0 = rng.uniform_int(0, W - obj.size);
                obj.y0 = rng.uniform_int(0, W - obj.size);
                ok = std::all_of(placed.begin(), placed.end(), [&](const Placed& o) {
                    return obj.x0 + obj.size + 2 <= o.x0 || o.x0 + o.size + 2 <= obj.x0 ||
                           obj.y0 + obj.size + 2 <= o.y0 || o.y0 + o.size + 2 <= obj.y0;
                });
            }
            if (!ok) {
                if (obj.size <= 6) throw std::runtime_error("data: cannot place object " + cat);
                obj.size -= 2;
            }
        }
        placed.push_back(obj);
    }

    for (const auto& obj : placed) {
        Rgb c = base_color(obj.color);
        c = {std::clamp(c.r + rng.uniform_int(-20, 20), 0, 255), std::clamp(c.g + rng.uniform_int(-20, 20), 0, 255),
             std::clamp(c.b + rng.uniform_int(-20, 20), 0, 255)};
        int minx = W, miny = W, maxx = -1, maxy = -1;
        for (int y = obj.y0; y < obj.y0 + obj.size; ++y) {
            for (int x = obj.x0; x < obj.x0 + obj.size; ++x) {
                if (!inside_shape(obj.shape, x + 0.5, y + 0.5, obj.x0, obj.y0, obj.size)) continue;
                auto* p = img.pixel(y, x);
                p[0] = static_cast<std::uint8_t>(c.r);
                p[1] = static_cast<std::uint8_t>(c.g);
                p[2] = static_cast<std::uint8_t>(c.b);
                minx = std::min(minx, x), maxx = std::max(maxx, x);
                miny = std::min(miny, y), maxy = std::max(maxy, y);
            }
        }
        out.record.annotations.push_back({{static_cast<double>(minx) / W, static_cast<double>(miny) / W,
                                           static_cast<double>(maxx + 1) / W, static_cast<double>(maxy + 1) / W},
                                          obj.color + " " + obj.shape});
    }

    std::vector<std::string> items;
    for (const auto& a : out.record.annotations) items.push_back("a " + a.category);
    std::shuffle(items.begin(), items.end(), rng.engine());
    std::string list;
    for (std::size_t i = 0; i < items.size(); ++i) list += (i ? " and " : "") + items[i];
    const auto& templates = caption_templates();
    std::string caption = templates[rng.uniform_int(0, static_cast<int>(templates.size()) - 1)];
    caption.replace(caption.find("{}"), 2, list);
    out.record.caption = caption;

    char name[32];
    std::snprintf(name, sizeof(name), "images/%05d.png", index);
    out.record.image_path = name;
    return out;
}

}  // namespace

std::vector<Sample> generate(const SyntheticSpec& spec) {
    spec.validate();
    Rng plan_rng(mix(spec.seed, 1000 + static_cast<std::uint64_t>(spec.split)));
    std::vector<int> counts(spec.num_images);
    int total = 0;
    for (int& c : counts) total += (c = plan_rng.uniform_int(spec.objects_min, spec.objects_max));

    const auto cats = spec.placeable();
    std::vector<std::string> sequence;
    while (static_cast<int>(sequence.size()) < total) {
        auto cycle = cats;
        std::shuffle(cycle.begin(), cycle.end(), plan_rng.engine());
        sequence.insert(sequence.end(), cycle.begin(), cycle.end());
    }

    std::vector<Sample> out;
    out.reserve(spec.num_images);
    std::size_t next = 0;
    for (int i = 0; i < spec.num_images; ++i) {
        std::vector<std::string> mine(sequence.begin() + next, sequence.begin() + next + counts[i]);
        next += counts[i];
        out.push_back(render(spec, i, mine));
    }
    return out;
}

std::vector<DatasetRecord> gen_synthetic_dataset(const SyntheticSpec& spec, const fs::path& out_dir) {
    auto samples = generate(spec);
    std::error_code ec;
    fs::create_directories(out_dir / "images", ec);
    if (ec) throw std::runtime_error("cannot create " + (out_dir / "images").string() + ": " + ec.message());
    std::vector<DatasetRecord> records;
    for (const auto& s : samples) {
        write_png(out_dir / s.record.image_path, s.image);
        records.push_back(s.record);
    }
    write_manifest(out_dir / "manifest.tsv", records);
    return records;
}

std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

namespace {

double parse_number(const std::string& s, const std::string& context) {
    double v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw std::runtime_error("manifest: bad number '" + s + "' in " + context);
    }
    return v;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(cur);
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

}  // namespace

void write_manifest(const fs::path& path, const std::vector<DatasetRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write manifest " + path.string());
    for (const auto& r : records) {
        if (r.caption.find_first_of("\t\n") != std::string::npos) {
            throw std::invalid_argument("manifest: caption contains a tab or newline");
        }
        out << r.image_path << '\t' << r.caption;
        for (const auto& a : r.annotations) {
            out << '\t' << format_number(a.box.x0) << ',' << format_number(a.box.y0) << ',' << format_number(a.box.x1)
                << ',' << format_number(a.box.y1) << ',' << a.category;
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("I/O failure writing manifest " + path.string());
}

std::vector<DatasetRecord> read_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read manifest " + path.string());
    std::vector<DatasetRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        auto fields = split(line, '\t');
        if (fields.size() < 2) throw std::runtime_error("manifest: expected path and caption at " + where);
        DatasetRecord r{fields[0], fields[1], {}};
        for (std::size_t i = 2; i < fields.size(); ++i) {
            auto parts = split(fields[i], ',');
            if (parts.size() != 5) throw std::runtime_error("manifest: annotation needs x0,y0,x1,y1,category at " + where);
            NormBox b{parse_number(parts[0], where), parse_number(parts[1], where), parse_number(parts[2], where),
                      parse_number(parts[3], where)};
            if (!b.valid()) throw std::runtime_error("manifest: invalid box " + b.str() + " at " + where);
            r.annotations.push_back({b, parts[4]});
        }
        out.push_back(std::move(r));
    }
    return out;
}

Dataset Dataset::load(const fs::path& dir) {
    Dataset d;
    d.records = read_manifest(dir / "manifest.tsv");
    d.images.reserve(d.records.size());
    for (const auto& r : d.records) d.images.push_back(read_png(dir / r.image_path));
    return d;
}

Tensor image_tensor(const std::vector<const Image*>& images) {
    if (images.empty()) throw std::invalid_argument("image_tensor: no images");
    const int h = images.front()->height, w = images.front()->width;
    std::vector<double> v;
    v.reserve(images.size() * h * w * 3);
    for (const Image* im : images) {
        if (im->height != h || im->width != w) throw std::invalid_argument("image_tensor: images differ in size");
        for (std::uint8_t px : im->rgb) v.push_back((px / 255.0 - 0.5) / 0.5);
    }
    return Tensor::from({static_cast<int>(images.size()), h, w, 3}, std::move(v));
}

Tensor Dataset::batch(const std::vector<int>& rows) const {
    std::vector<const Image*> ims;
    for (int r : rows) ims.push_back(&images.at(r));
    return image_tensor(ims);
}

}  // namespace dito::data
