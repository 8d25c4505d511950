#include "dito/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dito {

namespace {

constexpr char kMagic[8] = {'D', 'I', 'T', 'O', 'C', 'K', 'P', 'T'};

template <typename T>
void put_raw(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
    put_raw<std::uint64_t>(out, s.size());
    out += s;
}

class Reader {
public:
    explicit Reader(const std::string& s) : s_(s) {}
    template <typename T>
    T raw() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, s_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string str() {
        const auto n = raw<std::uint64_t>();
        need(n);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    bool done() const { return pos_ == s_.size(); }

private:
    void need(std::size_t n) const {
        if (s_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated file");
    }
    const std::string& s_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string Checkpoint::to_bytes() const {
    std::string out(kMagic, sizeof(kMagic));
    put_raw<std::uint32_t>(out, kVersion);
    put_string(out, stage);
    put_string(out, config);
    put_string(out, rng_state);
    put_raw<std::uint64_t>(out, step);
    put_raw<std::uint64_t>(out, meta.size());
    for (const auto& [k, v] : meta) {
        put_string(out, k);
        put_string(out, v);
    }
    put_raw<std::uint64_t>(out, blobs.size());
    for (const auto& [name, b] : blobs) {
        put_string(out, name);
        put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
        for (int d : b.shape) put_raw<std::int32_t>(out, d);
        put_raw<std::uint64_t>(out, b.values.size());
        out.append(reinterpret_cast<const char*>(b.values.data()), b.values.size() * sizeof(double));
    }
    return out;
}

Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
    if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("checkpoint: bad magic (not a checkpoint file)");
    }
    Reader r(bytes);
    for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.raw<char>();
    const auto version = r.raw<std::uint32_t>();
    if (version != kVersion) {
        throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
    }
    Checkpoint c;
    c.stage = r.str();
    c.config = r.str();
    c.rng_state = r.str();
    c.step = r.raw<std::uint64_t>();
    const auto n_meta = r.raw<std::uint64_t>();
    for (std::uint64_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        c.meta[std::move(k)] = r.str();
    }
    const auto n = r.raw<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
        std::string name = r.str();
        Blob b;
        const auto rank = r.raw<std::uint32_t>();
        for (std::uint32_t d = 0; d < rank; ++d) b.shape.push_back(r.raw<std::int32_t>());
        const auto count = r.raw<std::uint64_t>();
        if (count != shape_numel(b.shape)) throw std::runtime_error("checkpoint: blob '" + name + "' size mismatch");
        b.values.resize(count);
        for (auto& v : b.values) v = r.raw<double>();
        c.blobs.emplace(std::move(name), std::move(b));
    }
    if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
    return c;
}

void Checkpoint::save(const std::filesystem::path& path) const {
    const std::string bytes = to_bytes();
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw std::runtime_error("checkpoint: I/O failure writing " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_bytes(ss.str());
}

void Checkpoint::put(const std::string& name, const Tensor& t) {
    blobs[name] = Blob{t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

void Checkpoint::put(const ParamList& params, const std::string& prefix) {
    for (const auto& [name, t] : params) put(prefix + name, t);
}

void Checkpoint::get(ParamList& params, const std::string& prefix) const {
    for (auto& [name, t] : params) {
        auto it = blobs.find(prefix + name);
        if (it == blobs.end()) throw std::runtime_error("checkpoint (" + stage + "): missing parameter '" + prefix + name + "'");
        if (it->second.shape != t.shape()) {
            throw std::runtime_error("checkpoint (" + stage + "): parameter '" + prefix + name + "' has shape " +
                                     shape_str(it->second.shape) + ", model expects " + shape_str(t.shape()));
        }
        auto dst = t.mutable_data();
        std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
    }
}

Tensor Checkpoint::tensor(const std::string& name, bool requires_grad) const {
    auto it = blobs.find(name);
    if (it == blobs.end()) throw std::runtime_error("checkpoint (" + stage + "): missing blob '" + name + "'");
    return Tensor::from(it->second.shape, it->second.values, requires_grad);
}

Checkpoint require_checkpoint(const std::filesystem::path& path, const std::string& producing_stage) {
    if (!std::filesystem::exists(path)) {
        throw std::runtime_error("missing checkpoint " + path.string() + "; run `dito " + producing_stage +
                                 "` with the same --out first");
    }
    return Checkpoint::load(path);
}

}  // namespace dito
