#include "mcg/io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mcg {

namespace {

using nlohmann::json;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f64(std::vector<unsigned char>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const unsigned char* p) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::string& path, const void* data, std::size_t len) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(len));
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace

std::vector<unsigned char> tensor_to_bytes(const Tensor& t) {
    std::vector<unsigned char> out;
    out.reserve(8 + 4 * t.rank() + 8 * t.numel());
    for (char c : {'M', 'C', 'T', '1'}) out.push_back(static_cast<unsigned char>(c));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t a = 0; a < t.rank(); ++a)
        put_u32(out, static_cast<std::uint32_t>(t.extent(a)));
    for (std::size_t i = 0; i < t.numel(); ++i) put_f64(out, t[i]);
    return out;
}

Tensor tensor_from_bytes(const unsigned char* data, std::size_t len) {
    if (len < 8 || std::memcmp(data, "MCT1", 4) != 0)
        throw IoError("tensor: bad magic");
    std::uint32_t rank = get_u32(data + 4);
    if (rank > 8) throw IoError("tensor: unreasonable rank");
    if (len < 8 + 4ull * rank) throw IoError("tensor: truncated header");
    std::vector<std::size_t> shape;
    std::size_t numel = 1;
    for (std::uint32_t a = 0; a < rank; ++a) {
        std::uint32_t e = get_u32(data + 8 + 4 * a);
        shape.push_back(e);
        numel *= e;
    }
    std::size_t offset = 8 + 4ull * rank;
    if (len != offset + 8ull * numel) throw IoError("tensor: payload size mismatch");
    Tensor t(shape);
    for (std::size_t i = 0; i < numel; ++i) t[i] = get_f64(data + offset + 8 * i);
    return t;
}

void write_tensor(const std::string& path, const Tensor& t) {
    std::vector<unsigned char> bytes = tensor_to_bytes(t);
    write_file(path, bytes.data(), bytes.size());
}

Tensor read_tensor(const std::string& path) {
    std::vector<unsigned char> bytes = read_file(path);
    return tensor_from_bytes(bytes.data(), bytes.size());
}

void write_pgm(const std::string& path, const Map2D& m) {
    if (m.h < 1 || m.w < 1) throw IoError("pgm: empty map");
    double lo = m.v[0], hi = m.v[0];
    for (double v : m.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::vector<unsigned char> pixels(m.v.size());
    double den = hi - lo;
    for (std::size_t i = 0; i < m.v.size(); ++i) {
        if (den > 0.0)
            pixels[i] = static_cast<unsigned char>(std::lround((m.v[i] - lo) / den * 255.0));
        else
            pixels[i] = lo != 0.0 ? 255 : 0;
    }
    std::ostringstream header;
    header << "P5\n" << m.w << " " << m.h << "\n255\n";
    std::string h = header.str();
    std::vector<unsigned char> bytes(h.begin(), h.end());
    bytes.insert(bytes.end(), pixels.begin(), pixels.end());
    write_file(path, bytes.data(), bytes.size());
}

Map2D read_pgm(const std::string& path) {
    std::vector<unsigned char> bytes = read_file(path);
    std::string text(bytes.begin(), bytes.end());
    std::istringstream in(text);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    in >> magic >> w >> h >> maxval;
    if (magic != "P5" || w < 1 || h < 1 || maxval != 255)
        throw IoError("pgm: unsupported header in " + path);
    in.get();  // single whitespace byte before the raster
    std::size_t offset = static_cast<std::size_t>(in.tellg());
    std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    if (bytes.size() < offset + need) throw IoError("pgm: truncated raster in " + path);
    Map2D m(h, w);
    for (std::size_t i = 0; i < need; ++i)
        m.v[i] = static_cast<double>(bytes[offset + i]) / 255.0;
    return m;
}

void write_png_rgb(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.extent(2) != 3) throw IoError("png: image must be (h, w, 3)");
    int h = static_cast<int>(image.extent(0));
    int w = static_cast<int>(image.extent(1));

    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (fp == nullptr) throw IoError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        if (png != nullptr) png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("png: writer setup failed");
    }
    std::vector<unsigned char> raster(static_cast<std::size_t>(h) * w * 3);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < 3; ++c) {
                double v = std::clamp(image.at3(y, x, c), 0.0, 1.0);
                raster[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        }
        rows[static_cast<std::size_t>(y)] = raster.data() + static_cast<std::size_t>(y) * w * 3;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("png: write failed for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

Tensor read_png_rgb(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (fp == nullptr) throw IoError("cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
    if (png == nullptr || info == nullptr) {
        if (png != nullptr) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("png: reader setup failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("png: read failed for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = 0, h = 0;
    int bit_depth = 0, color_type = 0;
    png_get_IHDR(png, info, &w, &h, &bit_depth, &color_type, nullptr, nullptr, nullptr);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (bit_depth == 16) png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_RGB_ALPHA || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_strip_alpha(png);
    png_read_update_info(png, info);
    if (png_get_rowbytes(png, info) != static_cast<std::size_t>(w) * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("png: unsupported channel layout in " + path);
    }
    std::vector<unsigned char> raster(static_cast<std::size_t>(h) * w * 3);
    std::vector<png_bytep> rows(h);
    for (png_uint_32 y = 0; y < h; ++y)
        rows[y] = raster.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);

    Tensor img({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
    for (std::size_t i = 0; i < raster.size(); ++i)
        img[i] = static_cast<double>(raster[i]) / 255.0;
    return img;
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const unsigned char* data, std::size_t len) {
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    for (std::size_t i = 0; i < len; i += 3) {
        std::uint32_t chunk = static_cast<std::uint32_t>(data[i]) << 16;
        if (i + 1 < len) chunk |= static_cast<std::uint32_t>(data[i + 1]) << 8;
        if (i + 2 < len) chunk |= static_cast<std::uint32_t>(data[i + 2]);
        out.push_back(kB64[(chunk >> 18) & 63]);
        out.push_back(kB64[(chunk >> 12) & 63]);
        out.push_back(i + 1 < len ? kB64[(chunk >> 6) & 63] : '=');
        out.push_back(i + 2 < len ? kB64[chunk & 63] : '=');
    }
    return out;
}

std::vector<unsigned char> base64_decode(const std::string& text) {
    if (text.size() % 4 != 0) throw IoError("base64: length not a multiple of 4");
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    std::vector<unsigned char> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int pad = 0;
        std::uint32_t chunk = 0;
        for (int j = 0; j < 4; ++j) {
            char c = text[i + j];
            if (c == '=') {
                if (i + 4 != text.size() || j < 2) throw IoError("base64: misplaced padding");
                ++pad;
                chunk <<= 6;
                continue;
            }
            if (pad > 0) throw IoError("base64: data after padding");
            int v = value_of(c);
            if (v < 0) throw IoError("base64: invalid character");
            chunk = (chunk << 6) | static_cast<std::uint32_t>(v);
        }
        out.push_back(static_cast<unsigned char>((chunk >> 16) & 0xff));
        if (pad < 2) out.push_back(static_cast<unsigned char>((chunk >> 8) & 0xff));
        if (pad < 1) out.push_back(static_cast<unsigned char>(chunk & 0xff));
    }
    return out;
}

std::uint64_t params_fingerprint(const DenoiserParams& params) {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    auto mix = [&hash](const unsigned char* data, std::size_t len) {
        for (std::size_t i = 0; i < len; ++i) {
            hash ^= data[i];
            hash *= 0x100000001b3ULL;
        }
    };
    params.for_each_named([&](const std::string& name, const Tensor& t) {
        mix(reinterpret_cast<const unsigned char*>(name.data()), name.size());
        for (std::size_t a = 0; a < t.rank(); ++a) {
            std::uint64_t e = t.extent(a);
            unsigned char b[8];
            for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((e >> (8 * i)) & 0xff);
            mix(b, 8);
        }
        for (std::size_t i = 0; i < t.numel(); ++i) {
            std::uint64_t bits;
            double v = t[i];
            std::memcpy(&bits, &v, sizeof(bits));
            unsigned char b[8];
            for (int j = 0; j < 8; ++j) b[j] = static_cast<unsigned char>((bits >> (8 * j)) & 0xff);
            mix(b, 8);
        }
    });
    return hash;
}

namespace {

std::string fingerprint_hex(std::uint64_t fp) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
    return buf;
}

std::uint64_t fingerprint_from_hex(const std::string& s) {
    if (s.size() != 16) throw IoError("checkpoint: bad fingerprint field");
    std::uint64_t v = 0;
    for (char c : s) {
        int d;
        if (c >= '0' && c <= '9') d = c - '0';
        else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
        else throw IoError("checkpoint: bad fingerprint field");
        v = (v << 4) | static_cast<std::uint64_t>(d);
    }
    return v;
}

}  // namespace

void save_adapter(const std::string& path, const ConceptAdapter& adapter,
                  std::uint64_t world_fingerprint) {
    json doc;
    doc["format"] = 1;
    doc["kind"] = adapter_kind_name(adapter.kind);
    doc["trigger"] = adapter.trigger;
    doc["trigger_id"] = adapter.trigger_id;
    doc["scale"] = adapter.scale;
    doc["rank"] = adapter.rank;
    doc["world_fingerprint"] = fingerprint_hex(world_fingerprint);
    json payload = json::object();
    for (const auto& [name, tensor] : adapter.payload) {
        std::vector<unsigned char> bytes = tensor_to_bytes(tensor);
        payload[name] = base64_encode(bytes.data(), bytes.size());
    }
    doc["payload"] = payload;
    std::string text = doc.dump(2);
    text.push_back('\n');
    write_file(path, text.data(), text.size());
}

LoadedAdapter load_adapter(const std::string& path) {
    std::vector<unsigned char> bytes = read_file(path);
    json doc;
    try {
        doc = json::parse(bytes.begin(), bytes.end());
    } catch (const json::parse_error& e) {
        throw IoError("checkpoint: " + std::string(e.what()));
    }
    try {
        if (doc.at("format").get<int>() != 1) throw IoError("checkpoint: unsupported format");
        LoadedAdapter out;
        out.adapter.kind = adapter_kind_from_name(doc.at("kind").get<std::string>());
        out.adapter.trigger = doc.at("trigger").get<std::string>();
        out.adapter.trigger_id = doc.at("trigger_id").get<int>();
        out.adapter.scale = doc.at("scale").get<double>();
        out.adapter.rank = doc.at("rank").get<int>();
        out.world_fingerprint = fingerprint_from_hex(doc.at("world_fingerprint").get<std::string>());
        for (const auto& [name, value] : doc.at("payload").items()) {
            std::vector<unsigned char> raw = base64_decode(value.get<std::string>());
            out.adapter.payload.emplace(name, tensor_from_bytes(raw.data(), raw.size()));
        }
        return out;
    } catch (const json::exception& e) {
        throw IoError("checkpoint: " + std::string(e.what()));
    }
}

void save_dataset(const std::string& dir, const std::vector<GroundedSample>& samples,
                  const Vocabulary& vocab, const std::string& concept_name,
                  const std::string& trigger) {
    if (samples.empty()) throw IoError("dataset: nothing to save");
    std::filesystem::create_directories(dir);
    std::string caption = vocab.decode(samples[0].tokens);
    int trigger_id = vocab.id_of(trigger);
    int h = static_cast<int>(samples[0].x0.extent(0));
    int w = static_cast<int>(samples[0].x0.extent(1));

    for (std::size_t i = 0; i < samples.size(); ++i) {
        const GroundedSample& s = samples[i];
        if (vocab.decode(s.tokens) != caption) throw IoError("dataset: mixed captions");
        int pos = -1;
        for (std::size_t j = 0; j < s.tokens.size(); ++j)
            if (s.tokens[j] == trigger_id) {
                pos = static_cast<int>(j);
                break;
            }
        if (pos < 0) throw IoError("dataset: caption lacks the trigger token");
        char name[32];
        std::snprintf(name, sizeof(name), "%03zu", i);
        write_png_rgb(dir + "/" + name + ".png", latent_to_image(s.x0));
        write_pgm(dir + "/" + name + ".mask.pgm", s.masks[static_cast<std::size_t>(pos)]);
    }
    json meta;
    meta["format"] = 1;
    meta["concept"] = concept_name;
    meta["trigger"] = trigger;
    meta["caption"] = caption;
    meta["count"] = samples.size();
    meta["height"] = h;
    meta["width"] = w;
    std::string text = meta.dump(2);
    text.push_back('\n');
    write_file(dir + "/meta", text.data(), text.size());
}

std::vector<GroundedSample> load_dataset(const std::string& dir, const Vocabulary& vocab) {
    std::vector<unsigned char> bytes = read_file(dir + "/meta");
    json meta;
    try {
        meta = json::parse(bytes.begin(), bytes.end());
        if (meta.at("format").get<int>() != 1) throw IoError("dataset: unsupported format");
    } catch (const json::exception& e) {
        throw IoError("dataset: " + std::string(e.what()));
    }
    std::string caption = meta.at("caption").get<std::string>();
    std::string trigger = meta.at("trigger").get<std::string>();
    std::size_t count = meta.at("count").get<std::size_t>();
    std::vector<int> tokens = vocab.encode(caption);
    int trigger_id = vocab.id_of(trigger);

    std::vector<GroundedSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "%03zu", i);
        Tensor img = read_png_rgb(dir + "/" + name + ".png");
        Map2D mask = read_pgm(dir + "/" + name + ".mask.pgm");
        for (double& v : mask.v) v = v > 0.5 ? 1.0 : 0.0;
        GroundedSample s;
        s.x0 = image_to_latent(img);
        s.tokens = tokens;
        s.masks.assign(tokens.size(),
                       Map2D(static_cast<int>(img.extent(0)), static_cast<int>(img.extent(1)), 1.0));
        for (std::size_t j = 0; j < tokens.size(); ++j)
            if (tokens[j] == trigger_id) s.masks[j] = mask;
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

json breakdown_json(const LossBreakdown& b) {
    return json{{"total", b.total},
                {"inter", b.inter},
                {"intra", b.intra},
                {"ae", b.ae},
                {"inter_degenerate", b.inter_degenerate}};
}

}  // namespace

void save_trace(const std::string& path, const RunTrace& trace) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    for (const StepRecord& rec : trace.steps) {
        json line;
        line["step"] = rec.step;
        line["position"] = rec.position;
        line["t_train"] = rec.t_train;
        line["guided"] = rec.guided;
        line["lambda"] = rec.lambda;
        json stage1 = json::array();
        for (const LossBreakdown& b : rec.stage1) stage1.push_back(breakdown_json(b));
        line["stage1"] = stage1;
        line["grad_norms"] = rec.grad_norms;
        if (rec.post_valid) line["post"] = breakdown_json(rec.post);
        line["eps_norms"] = rec.eps_norms;
        line["z_norm"] = rec.z_norm;
        line["mask_refined"] = rec.mask_refined;
        line["mask_degenerate"] = rec.mask_degenerate;
        out << line.dump() << "\n";
    }
    if (!out) throw IoError("write failed for " + path);
}

void save_metrics(const std::string& path, const RunEvaluation& eval,
                  const std::vector<std::string>& concept_names) {
    if (concept_names.size() != eval.mean_presence.size())
        throw IoError("metrics: name count mismatch");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    json summary;
    summary["co_occurrence_rate"] = eval.co_occurrence_rate;
    for (std::size_t k = 0; k < concept_names.size(); ++k)
        summary["mean_presence." + concept_names[k]] = eval.mean_presence[k];
    summary["mean_final_inter_loss"] = eval.mean_final_inter;
    out << summary.dump() << "\n";
    for (std::size_t i = 0; i < eval.per_run.size(); ++i) {
        const SceneMetrics& m = eval.per_run[i];
        json line;
        line["run"] = i;
        for (std::size_t k = 0; k < concept_names.size(); ++k)
            line["presence." + concept_names[k]] = m.presence[k];
        line["co_occurrence"] = m.co_occurrence;
        line["final_inter"] = m.final_inter;
        line["wall_seconds"] = m.wall_seconds;
        out << line.dump() << "\n";
    }
    if (!out) throw IoError("write failed for " + path);
}

void save_loss_curve(const std::string& path, const TrainStats& stats) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    for (std::size_t i = 0; i < stats.loss_curve.size(); ++i)
        out << json{{"step", i}, {"loss", stats.loss_curve[i]}}.dump() << "\n";
    out << json{{"final_loss", stats.final_loss},
                {"final_mse", stats.final_mse},
                {"final_l1", stats.final_l1},
                {"final_l2", stats.final_l2}}
               .dump()
        << "\n";
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace mcg
