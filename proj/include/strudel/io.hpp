#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "strudel/backbones.hpp"
#include "strudel/datasets.hpp"
#include "strudel/error.hpp"
#include "strudel/grid.hpp"

namespace strudel::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("io", "cannot open '" + p.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
inline void write_file(const fs::path& p, const std::string& bytes) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    const fs::path tmp = p.string() + ".part";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("io", "cannot write '" + tmp.string() + "'");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("io", "short write to '" + tmp.string() + "'");
    }
    fs::rename(tmp, p);
}

// ---------------------------------------------------------------------------
// Backbone spec as JSON

inline json to_json(const backbones::BackboneSpec& s) {
    return {{"kind", backbones::to_string(s.kind)}, {"depth", s.depth},
            {"base_channels", s.base_channels}, {"dropout_rate", s.dropout_rate},
            {"octave_alpha", s.octave_alpha}, {"se_reduction", s.se_reduction},
            {"norm", backbones::to_string(s.norm)}, {"norm_groups", s.norm_groups}};
}

inline backbones::BackboneSpec spec_from_json(const json& j) {
    backbones::BackboneSpec s;
    if (j.contains("kind")) s.kind = backbones::parse_kind(j.at("kind").get<std::string>());
    if (j.contains("norm")) s.norm = backbones::parse_norm(j.at("norm").get<std::string>());
    s.depth = j.value("depth", s.depth);
    s.base_channels = j.value("base_channels", s.base_channels);
    s.dropout_rate = j.value("dropout_rate", s.dropout_rate);
    s.octave_alpha = j.value("octave_alpha", s.octave_alpha);
    s.se_reduction = j.value("se_reduction", s.se_reduction);
    s.norm_groups = j.value("norm_groups", s.norm_groups);
    s.validate();
    return s;
}

// ---------------------------------------------------------------------------
// Checkpoints: "STRDLCKP", u32 version, u64 header length, JSON header,
// then every tensor as raw little-endian float32 in header order.

inline constexpr char checkpoint_magic[8] = {'S', 'T', 'R', 'D', 'L', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_version = 1;

inline std::string encode_checkpoint(const backbones::ModelParams<float>& p) {
    json tensors = json::array();
    for (std::size_t i = 0; i < p.tensors.size(); ++i) {
        const auto& t = p.tensors[i];
        tensors.push_back({{"name", p.names[i]}, {"shape", {t.n, t.c, t.h, t.w}}});
    }
    const json header = {{"format_version", checkpoint_version}, {"dtype", "float32"},
                         {"seed", p.seed}, {"spec", to_json(p.spec)}, {"tensors", tensors}};
    const std::string h = header.dump();
    std::string out(checkpoint_magic, sizeof checkpoint_magic);
    const std::uint32_t version = checkpoint_version;
    const std::uint64_t hlen = h.size();
    out.append(reinterpret_cast<const char*>(&version), sizeof version);
    out.append(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out += h;
    for (const auto& t : p.tensors) out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
    return out;
}

inline backbones::ModelParams<float> decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
    auto fail = [&](const std::string& m) -> void { throw IoError("io", origin + ": " + m); };
    const std::size_t fixed = sizeof checkpoint_magic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
    if (bytes.size() < fixed || std::memcmp(bytes.data(), checkpoint_magic, sizeof checkpoint_magic) != 0)
        fail("not a checkpoint file");
    std::uint32_t version;
    std::uint64_t hlen;
    std::memcpy(&version, bytes.data() + 8, sizeof version);
    std::memcpy(&hlen, bytes.data() + 12, sizeof hlen);
    if (version != checkpoint_version)
        fail("unsupported format version " + std::to_string(version) + " (expected " + std::to_string(checkpoint_version) + ")");
    if (bytes.size() < fixed + hlen) fail("truncated header");
    json header;
    try {
        header = json::parse(bytes.substr(fixed, hlen));
    } catch (const json::exception& e) {
        fail(std::string("bad header: ") + e.what());
    }
    if (header.value("dtype", "") != "float32") fail("unsupported dtype");
    backbones::ModelParams<float> p;
    p.spec = spec_from_json(header.at("spec"));
    p.seed = header.at("seed").get<std::uint64_t>();
    std::size_t off = fixed + hlen;
    for (const auto& t : header.at("tensors")) {
        const auto shape = t.at("shape").get<std::vector<int>>();
        if (shape.size() != 4) fail("tensor shape must have 4 dimensions");
        nn::Tensor<float> tensor(shape[0], shape[1], shape[2], shape[3]);
        const std::size_t nbytes = tensor.size() * sizeof(float);
        if (bytes.size() < off + nbytes) fail("truncated tensor data");
        std::memcpy(tensor.data.data(), bytes.data() + off, nbytes);
        off += nbytes;
        p.names.push_back(t.at("name").get<std::string>());
        p.tensors.push_back(std::move(tensor));
    }
    if (off != bytes.size()) fail("trailing bytes after tensor data");
    const auto reference = backbones::init_model<float>(p.spec, 0);
    if (reference.names != p.names) fail("tensor names do not match the embedded spec");
    for (std::size_t i = 0; i < p.tensors.size(); ++i)
        if (!reference.tensors[i].same_shape(p.tensors[i])) fail("tensor '" + p.names[i] + "' does not match the embedded spec");
    return p;
}

inline void save_checkpoint(const fs::path& path, const backbones::ModelParams<float>& p) {
    write_file(path, encode_checkpoint(p));
}

inline backbones::ModelParams<float> load_checkpoint(const fs::path& path) {
    return decode_checkpoint(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Grids as portable image files

/// Binary PGM for masks: 0 or maxval at 8 or 16 bits per pixel.
inline std::string encode_mask_pgm(const Mask& m, int bits = 8) {
    if (bits != 8 && bits != 16) throw IoError("io", "mask bit depth must be 8 or 16");
    const int maxval = bits == 8 ? 255 : 65535;
    std::string out = "P5\n" + std::to_string(m.width()) + " " + std::to_string(m.height()) + "\n" + std::to_string(maxval) + "\n";
    for (auto v : m) {
        const char c = static_cast<char>(v ? 0xff : 0);
        out.push_back(c);
        if (bits == 16) out.push_back(c);
    }
    return out;
}

namespace detail {

/// Parses "P5\n<w> <h>\n<maxval>\n" and returns the payload offset.
inline std::size_t parse_pgm_header(const std::string& b, int& w, int& h, int& maxval, const std::string& origin) {
    std::istringstream in(b);
    std::string magic;
    in >> magic >> w >> h >> maxval;
    if (!in || magic != "P5" || w < 0 || h < 0 || maxval <= 0 || maxval > 65535)
        throw IoError("io", origin + ": not a binary PGM");
    const auto pos = static_cast<std::size_t>(in.tellg()) + 1;
    const std::size_t bpp = maxval > 255 ? 2 : 1;
    if (b.size() != pos + static_cast<std::size_t>(w) * h * bpp) throw IoError("io", origin + ": PGM payload size mismatch");
    return pos;
}

}  // namespace detail

inline Mask decode_mask_pgm(const std::string& b, const std::string& origin = "mask") {
    int w, h, maxval;
    const std::size_t off = detail::parse_pgm_header(b, w, h, maxval, origin);
    const std::size_t bpp = maxval > 255 ? 2 : 1;
    Mask m(h, w);
    for (std::size_t i = 0; i < m.size(); ++i) {
        unsigned v = static_cast<unsigned char>(b[off + bpp * i]);
        if (bpp == 2) v = v << 8 | static_cast<unsigned char>(b[off + 2 * i + 1]);
        if (v != 0 && v != static_cast<unsigned>(maxval)) throw IoError("io", origin + ": mask pixels must be 0 or " + std::to_string(maxval));
        m[i] = v ? 1 : 0;
    }
    return m;
}

/// 16-bit big-endian PGM, linearly quantized between lo and hi.
inline std::string encode_image_pgm16(const Image& img, double lo, double hi) {
    std::string out = "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n65535\n";
    const double range = hi > lo ? hi - lo : 1.0;
    for (double v : img) {
        const double q = std::clamp((v - lo) / range, 0.0, 1.0) * 65535.0;
        const auto u = static_cast<std::uint16_t>(std::lround(q));
        out.push_back(static_cast<char>(u >> 8));
        out.push_back(static_cast<char>(u & 0xff));
    }
    return out;
}

inline Image decode_image_pgm16(const std::string& b, double lo, double hi, const std::string& origin = "image") {
    int w, h, maxval;
    const std::size_t off = detail::parse_pgm_header(b, w, h, maxval, origin);
    if (maxval != 65535) throw IoError("io", origin + ": images must be 16-bit");
    Image img(h, w);
    const double range = hi > lo ? hi - lo : 1.0;
    for (std::size_t i = 0; i < img.size(); ++i) {
        const auto u = static_cast<std::uint16_t>((static_cast<unsigned char>(b[off + 2 * i]) << 8) |
                                                  static_cast<unsigned char>(b[off + 2 * i + 1]));
        img[i] = lo + range * (u / 65535.0);
    }
    return img;
}

/// Little-endian float32 PFM (greyscale), rows stored bottom to top.
inline std::string encode_pfm(const Grid<double>& g) {
    std::string out = "Pf\n" + std::to_string(g.width()) + " " + std::to_string(g.height()) + "\n-1.0\n";
    for (int y = g.height() - 1; y >= 0; --y)
        for (int x = 0; x < g.width(); ++x) {
            const float f = static_cast<float>(g(y, x));
            out.append(reinterpret_cast<const char*>(&f), sizeof f);
        }
    return out;
}

inline Grid<double> decode_pfm(const std::string& b, const std::string& origin = "pfm") {
    std::istringstream in(b);
    std::string magic;
    int w, h;
    double scale;
    in >> magic >> w >> h >> scale;
    if (!in || magic != "Pf" || w < 0 || h < 0 || scale >= 0) throw IoError("io", origin + ": not a little-endian greyscale PFM");
    const auto off = static_cast<std::size_t>(in.tellg()) + 1;
    if (b.size() != off + static_cast<std::size_t>(w) * h * sizeof(float)) throw IoError("io", origin + ": PFM payload size mismatch");
    Grid<double> g(h, w);
    std::size_t k = off;
    for (int y = h - 1; y >= 0; --y)
        for (int x = 0; x < w; ++x, k += sizeof(float)) {
            float f;
            std::memcpy(&f, b.data() + k, sizeof f);
            g(y, x) = f;
        }
    return g;
}

// ---------------------------------------------------------------------------
// Dataset directories: one 16-bit image and one 16-bit mask per sample plus
// manifest.txt with one "key=value ..." record per sample.

inline constexpr const char* manifest_name = "manifest.txt";

struct ManifestRecord {
    std::string id;
    std::string domain;
    std::string split;  ///< e.g. train, pool, eval, labeled
    std::string image;  ///< path relative to the dataset directory
    std::string mask;   ///< empty when the sample has no mask
    double lo = 0.0, hi = 1.0;  ///< quantization range of the image
};

namespace detail {

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

inline std::string format_manifest(const std::vector<ManifestRecord>& records) {
    std::string out = "# strudel dataset manifest v1\n";
    for (const auto& r : records) {
        out += "id=" + r.id + " domain=" + r.domain + " split=" + r.split + " image=" + r.image;
        if (!r.mask.empty()) out += " mask=" + r.mask;
        out += " lo=" + detail::format_double(r.lo) + " hi=" + detail::format_double(r.hi) + "\n";
    }
    return out;
}

inline std::vector<ManifestRecord> parse_manifest(const std::string& text, const std::string& origin = "manifest") {
    std::vector<ManifestRecord> out;
    std::istringstream lines(text);
    std::string line;
    int lineno = 0;
    while (std::getline(lines, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        std::map<std::string, std::string> kv;
        std::istringstream fields(line);
        std::string token;
        while (fields >> token) {
            const auto eq = token.find('=');
            if (eq == std::string::npos || eq == 0) throw IoError("io", where + ": expected key=value, got '" + token + "'");
            if (!kv.emplace(token.substr(0, eq), token.substr(eq + 1)).second)
                throw IoError("io", where + ": duplicate key '" + token.substr(0, eq) + "'");
        }
        auto need = [&](const char* key) {
            const auto it = kv.find(key);
            if (it == kv.end() || it->second.empty()) throw IoError("io", where + ": missing '" + key + "'");
            return it->second;
        };
        auto number = [&](const char* key) {
            const auto v = need(key);
            char* end = nullptr;
            const double d = std::strtod(v.c_str(), &end);
            if (end != v.c_str() + v.size()) throw IoError("io", where + ": '" + key + "' is not a number");
            return d;
        };
        ManifestRecord r;
        r.id = need("id");
        r.domain = need("domain");
        r.split = need("split");
        r.image = need("image");
        if (kv.count("mask")) r.mask = kv["mask"];
        r.lo = number("lo");
        r.hi = number("hi");
        out.push_back(std::move(r));
    }
    return out;
}

/// Writes images, masks and the manifest. `splits` gives each sample's split
/// name, parallel to `samples`.
inline void write_dataset(const fs::path& dir, const std::vector<datasets::ImageSample>& samples,
                          const std::vector<std::string>& splits) {
    if (splits.size() != samples.size()) throw IoError("io", "split list does not match the sample list");
    fs::create_directories(dir);
    std::vector<ManifestRecord> records;
    const auto key = datasets::grant_evaluation_access();
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const auto [lo, hi] = std::minmax_element(s.image().begin(), s.image().end());
        ManifestRecord r{s.id(), datasets::to_string(s.domain()), splits[i], s.id() + ".pgm", "", *lo, *hi};
        write_file(dir / r.image, encode_image_pgm16(s.image(), r.lo, r.hi));
        if (s.has_mask()) {
            r.mask = s.id() + "_mask.pgm";
            write_file(dir / r.mask, encode_mask_pgm(s.ground_truth(key), 16));
        }
        records.push_back(std::move(r));
    }
    write_file(dir / manifest_name, format_manifest(records));
}

struct DatasetEntry {
    datasets::ImageSample sample;
    std::string split;
};

inline std::vector<DatasetEntry> read_dataset(const fs::path& dir) {
    const auto manifest = dir / manifest_name;
    std::vector<DatasetEntry> out;
    for (const auto& r : parse_manifest(read_file(manifest), manifest.string())) {
        Image img = decode_image_pgm16(read_file(dir / r.image), r.lo, r.hi, r.id);
        std::optional<Mask> mask;
        if (!r.mask.empty()) mask = decode_mask_pgm(read_file(dir / r.mask), r.id);
        out.push_back({datasets::ImageSample(r.id, std::move(img), std::move(mask), datasets::parse_domain(r.domain)), r.split});
    }
    return out;
}

/// Samples of one split, in manifest order.
inline std::vector<datasets::ImageSample> select_split(const std::vector<DatasetEntry>& entries, const std::string& split) {
    std::vector<datasets::ImageSample> out;
    for (const auto& e : entries)
        if (e.split == split) out.push_back(e.sample);
    return out;
}

}  // namespace strudel::io
