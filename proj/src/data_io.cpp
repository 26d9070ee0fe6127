#include "funet/data_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <fstream>
#include <memory>
#include <numeric>

#include "funet/random.hpp"

namespace fs = std::filesystem;

namespace funet {

// ---------------------------------------------------------------------------------------------
// PNG

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const fs::path& path, const char* mode)
{
    FilePtr f(std::fopen(path.c_str(), mode));
    if (!f) throw IoError("cannot open " + path.string());
    return f;
}

void png_error_fn(png_structp png, png_const_charp msg)
{
    auto* text = static_cast<std::string*>(png_get_error_ptr(png));
    if (text) *text = msg;
    png_longjmp(png, 1);
}

void png_warning_fn(png_structp, png_const_charp) {}

// Raw decode: samples normalised to [0,1], interleaved, native channel count after dropping alpha.
struct Decoded {
    int channels = 0, height = 0, width = 0;
    std::vector<float> samples;
};

Decoded decode_png(const fs::path& path)
{
    auto file = open_file(path, "rb");
    std::string message;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    Decoded out;
    std::vector<png_byte> buffer;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw IoError("cannot decode " + path.string() + ": " + message);
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    png_set_expand(png);  // palette -> RGB, low-bit gray -> 8 bit, tRNS -> alpha
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int ch = png_get_channels(png, info);
    const auto h = png_get_image_height(png, info), w = png_get_image_width(png, info);
    const auto rowbytes = png_get_rowbytes(png, info);
    buffer.resize(rowbytes * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buffer.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    out.channels = ch;
    out.height = static_cast<int>(h);
    out.width = static_cast<int>(w);
    const std::size_t n = static_cast<std::size_t>(ch) * h * w;
    out.samples.resize(n);
    if (depth == 16) {
        for (std::size_t i = 0; i < n; ++i) {
            out.samples[i] = static_cast<float>((buffer[2 * i] << 8 | buffer[2 * i + 1]) / 65535.0);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) out.samples[i] = static_cast<float>(buffer[i] / 255.0);
    }
    return out;
}

}  // namespace

Image read_png(const fs::path& path, int channels)
{
    if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
    const auto d = decode_png(path);
    Image img(channels, d.height, d.width);
    const std::size_t hw = static_cast<std::size_t>(d.height) * d.width;
    for (std::size_t p = 0; p < hw; ++p) {
        const float* s = &d.samples[p * d.channels];
        if (channels == 1) {
            float acc = 0;
            for (int c = 0; c < d.channels; ++c) acc += s[c];
            img.data[p] = d.channels == 1 ? s[0] : acc / static_cast<float>(d.channels);
        } else {
            for (int c = 0; c < 3; ++c) img.data[c * hw + p] = d.channels >= 3 ? s[c] : s[0];
        }
    }
    return img;
}

Image read_mask_png(const fs::path& path)
{
    const auto d = decode_png(path);
    Image img(1, d.height, d.width);
    const std::size_t hw = static_cast<std::size_t>(d.height) * d.width;
    for (std::size_t p = 0; p < hw; ++p) {
        float m = 0;
        for (int c = 0; c < d.channels; ++c) m = std::max(m, d.samples[p * d.channels + c]);
        img.data[p] = m >= 0.5f ? 1.0f : 0.0f;
    }
    return img;
}

void write_png(const fs::path& path, const Image& img, int bit_depth)
{
    if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("write_png: 1 or 3 channels");
    if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("write_png: bit depth must be 8 or 16");
    if (img.height < 1 || img.width < 1) throw std::invalid_argument("write_png: empty image");
    const int bytes = bit_depth / 8;
    const std::size_t hw = static_cast<std::size_t>(img.height) * img.width;
    const std::size_t rowbytes = static_cast<std::size_t>(img.width) * img.channels * bytes;
    std::vector<png_byte> buffer(rowbytes * img.height);
    const double top = bit_depth == 16 ? 65535.0 : 255.0;
    for (std::size_t p = 0; p < hw; ++p) {
        for (int c = 0; c < img.channels; ++c) {
            const double v = std::clamp(static_cast<double>(img.data[c * hw + p]), 0.0, 1.0);
            const auto q = static_cast<unsigned>(std::lround(v * top));
            const std::size_t at = (p * img.channels + c) * bytes;
            if (bytes == 2) {
                buffer[at] = static_cast<png_byte>(q >> 8);
                buffer[at + 1] = static_cast<png_byte>(q & 0xff);
            } else {
                buffer[at] = static_cast<png_byte>(q);
            }
        }
    }
    std::vector<png_bytep> rows(img.height);
    for (int y = 0; y < img.height; ++y) rows[y] = buffer.data() + y * rowbytes;

    auto file = open_file(path, "wb");
    std::string message;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_fn, png_warning_fn);
    if (!png) throw IoError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("cannot write " + path.string() + ": " + message);
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, img.width, img.height, bit_depth,
                 img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(file.get()) != 0) throw IoError("cannot write " + path.string());
}

// ---------------------------------------------------------------------------------------------
// resampling

namespace {

void check_window(const Image& src, int y0, int x0, int ch, int cw, int h, int w)
{
    if (h < 1 || w < 1) throw std::invalid_argument("resize: target size must be positive");
    if (ch < 1 || cw < 1 || y0 < 0 || x0 < 0 || y0 + ch > src.height || x0 + cw > src.width) {
        throw std::invalid_argument("resize: crop window outside the image");
    }
}

}  // namespace

Image crop_resize_bilinear(const Image& src, int y0, int x0, int ch, int cw, int h, int w)
{
    check_window(src, y0, x0, ch, cw, h, w);
    Image out(src.channels, h, w);
    // half-pixel centres, edge clamped; same convention as the resize_bilinear op
    const double sy = static_cast<double>(ch) / h, sx = static_cast<double>(cw) / w;
    std::vector<int> xa(w), xb(w);
    std::vector<double> xf(w);
    for (int x = 0; x < w; ++x) {
        const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(cw - 1));
        xa[x] = static_cast<int>(fx);
        xb[x] = std::min(xa[x] + 1, cw - 1);
        xf[x] = fx - xa[x];
    }
    for (int y = 0; y < h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(ch - 1));
        const int ya = static_cast<int>(fy), yb = std::min(ya + 1, ch - 1);
        const double wy = fy - ya;
        for (int c = 0; c < src.channels; ++c) {
            for (int x = 0; x < w; ++x) {
                const double top = src.at(c, y0 + ya, x0 + xa[x]) * (1 - xf[x]) + src.at(c, y0 + ya, x0 + xb[x]) * xf[x];
                const double bot = src.at(c, y0 + yb, x0 + xa[x]) * (1 - xf[x]) + src.at(c, y0 + yb, x0 + xb[x]) * xf[x];
                out.at(c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

Image crop_resize_nearest(const Image& src, int y0, int x0, int ch, int cw, int h, int w)
{
    check_window(src, y0, x0, ch, cw, h, w);
    Image out(src.channels, h, w);
    for (int y = 0; y < h; ++y) {
        const int sy = std::min(static_cast<int>((static_cast<std::int64_t>(2 * y + 1) * ch) / (2 * h)), ch - 1);
        for (int x = 0; x < w; ++x) {
            const int sx = std::min(static_cast<int>((static_cast<std::int64_t>(2 * x + 1) * cw) / (2 * w)), cw - 1);
            for (int c = 0; c < src.channels; ++c) out.at(c, y, x) = src.at(c, y0 + sy, x0 + sx);
        }
    }
    return out;
}

Image hflip(const Image& src)
{
    Image out = src;
    for (int c = 0; c < src.channels; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) out.at(c, y, x) = src.at(c, y, src.width - 1 - x);
    return out;
}

std::pair<Image, Image> resize_pair(const Image& frame, const Image& mask, int h, int w)
{
    if (frame.height != mask.height || frame.width != mask.width) {
        throw std::invalid_argument("resize_pair: frame and mask sizes differ");
    }
    return {crop_resize_bilinear(frame, 0, 0, frame.height, frame.width, h, w),
            crop_resize_nearest(mask, 0, 0, mask.height, mask.width, h, w)};
}

// ---------------------------------------------------------------------------------------------
// manifest

std::string split_name(Split s)
{
    switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& name)
{
    if (name == "train") return Split::Train;
    if (name == "val") return Split::Val;
    if (name == "test") return Split::Test;
    throw std::invalid_argument("unknown split '" + name + "'");
}

std::vector<const SequenceEntry*> DatasetManifest::in_split(Split s) const
{
    std::vector<const SequenceEntry*> out;
    for (const auto& seq : sequences) {
        if (seq.split == s) out.push_back(&seq);
    }
    return out;
}

std::size_t DatasetManifest::frame_count(Split s) const
{
    std::size_t n = 0;
    for (const auto* seq : in_split(s)) n += seq->frames.size();
    return n;
}

nlohmann::json to_json(const DatasetManifest& m)
{
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& s : m.sequences) {
        seqs.push_back({{"id", s.id}, {"frames", s.frames}, {"masks", s.masks}, {"split", split_name(s.split)}});
    }
    return {{"root", m.root},
            {"sequences", seqs},
            {"seed", m.seed},
            {"ratios", m.ratios},
            {"foreground_only", m.foreground_only}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j)
{
    DatasetManifest m;
    try {
        m.root = j.value("root", std::string{});
        m.seed = j.at("seed").get<std::uint64_t>();
        m.ratios = j.at("ratios").get<std::array<double, 3>>();
        m.foreground_only = j.value("foreground_only", false);
        for (const auto& s : j.at("sequences")) {
            SequenceEntry e;
            e.id = s.at("id").get<std::string>();
            e.frames = s.at("frames").get<std::vector<std::string>>();
            e.masks = s.value("masks", std::vector<std::string>{});
            e.split = parse_split(s.at("split").get<std::string>());
            if (!e.masks.empty() && e.masks.size() != e.frames.size()) {
                throw std::invalid_argument("sequence " + e.id + ": frame/mask count mismatch");
            }
            m.sequences.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed manifest: ") + e.what());
    }
    return m;
}

void write_manifest(const fs::path& path, const DatasetManifest& m)
{
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(m).dump(1) << '\n';
    if (!out) throw IoError("cannot write " + path.string());
}

DatasetManifest read_manifest(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("cannot parse " + path.string() + ": " + e.what());
    }
    auto m = manifest_from_json(j);
    // a relative root is taken relative to the manifest's directory
    if (m.root.empty() || fs::path(m.root).is_relative()) m.root = (path.parent_path() / m.root).lexically_normal().string();
    return m;
}

std::array<int, 3> split_counts(int n, const std::array<double, 3>& ratios)
{
    double total = 0;
    for (double r : ratios) {
        if (!(r >= 0)) throw std::invalid_argument("split ratios must be nonnegative");
        total += r;
    }
    if (!(total > 0)) throw std::invalid_argument("split ratios must not all be zero");
    std::array<int, 3> counts{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        const double exact = n * ratios[i] / total;
        counts[i] = static_cast<int>(std::floor(exact + 1e-9));
        rem[i] = exact - counts[i];
        assigned += counts[i];
    }
    std::array<int, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (std::abs(rem[a] - rem[b]) > 1e-9) return rem[a] > rem[b];
        return a > b;  // ties favour the later split
    });
    for (int k = 0; assigned < n; ++k, ++assigned) counts[order[k % 3]] += 1;
    return counts;
}

namespace {

std::vector<std::string> list_pngs(const fs::path& dir, const fs::path& root)
{
    std::vector<std::string> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        auto ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png") out.push_back(fs::relative(e.path(), root).generic_string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// Seeded shuffle of whole sequences, then consecutive runs of the shuffled order per split.
void assign_splits(DatasetManifest& m)
{
    const auto counts = split_counts(static_cast<int>(m.sequences.size()), m.ratios);
    std::vector<std::size_t> order(m.sequences.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(stable_hash("split", m.seed));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t k = 0; k < order.size(); ++k) {
        const auto i = static_cast<int>(k);
        m.sequences[order[k]].split = i < counts[0] ? Split::Train : i < counts[0] + counts[1] ? Split::Val : Split::Test;
    }
}

}  // namespace

DatasetManifest load_manifest(const fs::path& root, const std::array<double, 3>& ratios, std::uint64_t seed)
{
    if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
    DatasetManifest m;
    m.root = root.string();
    m.seed = seed;
    m.ratios = ratios;
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root)) {
        if (e.is_directory() && fs::is_directory(e.path() / "frames")) dirs.push_back(e.path());
    }
    std::sort(dirs.begin(), dirs.end());
    if (dirs.empty()) throw IoError("no sequences (<id>/frames/) under " + root.string());
    for (const auto& d : dirs) {
        SequenceEntry e;
        e.id = d.filename().string();
        e.frames = list_pngs(d / "frames", root);
        if (e.frames.empty()) throw IoError("sequence " + e.id + " has no frames");
        if (fs::is_directory(d / "masks")) {
            e.masks = list_pngs(d / "masks", root);
            if (e.masks.size() != e.frames.size()) {
                throw IoError("sequence " + e.id + ": " + std::to_string(e.frames.size()) + " frames but " +
                              std::to_string(e.masks.size()) + " masks");
            }
        }
        m.sequences.push_back(std::move(e));
    }

    assign_splits(m);
    for (const auto& s : m.sequences) {
        if (s.split == Split::Train && s.masks.empty()) throw IoError("training sequence " + s.id + " has no masks");
    }
    return m;
}

DatasetManifest open_dataset(const fs::path& path, const std::array<double, 3>& ratios, std::uint64_t seed)
{
    if (fs::is_regular_file(path)) return read_manifest(path);
    if (fs::is_regular_file(path / "manifest.json")) return read_manifest(path / "manifest.json");
    return load_manifest(path, ratios, seed);
}

// ---------------------------------------------------------------------------------------------
// clips

std::vector<int> window_starts(int n_frames, int frames, int stride, bool tail_align)
{
    if (frames < 1 || stride < 1) throw std::invalid_argument("window_starts: T and stride must be positive");
    if (n_frames < frames) {
        throw std::invalid_argument("sequence of " + std::to_string(n_frames) + " frames is shorter than T=" +
                                    std::to_string(frames));
    }
    std::vector<int> starts;
    for (int s = 0; s + frames <= n_frames; s += stride) starts.push_back(s);
    if (tail_align && starts.back() + frames < n_frames) starts.push_back(n_frames - frames);
    return starts;
}

std::vector<LoadedSequence> load_sequences(const DatasetManifest& m, const std::vector<Split>& splits, int h, int w)
{
    std::vector<LoadedSequence> out;
    const fs::path root(m.root);
    for (const auto& s : m.sequences) {
        if (std::find(splits.begin(), splits.end(), s.split) == splits.end()) continue;
        LoadedSequence seq;
        seq.id = s.id;
        for (std::size_t i = 0; i < s.frames.size(); ++i) {
            auto frame = read_png(root / s.frames[i], 3);
            if (!s.masks.empty()) {
                auto [f, mk] = resize_pair(frame, read_mask_png(root / s.masks[i]), h, w);
                seq.frames.push_back(std::move(f));
                seq.masks.push_back(std::move(mk));
            } else {
                seq.frames.push_back(crop_resize_bilinear(frame, 0, 0, frame.height, frame.width, h, w));
            }
        }
        out.push_back(std::move(seq));
    }
    return out;
}

std::vector<ClipRef> training_windows(const std::vector<LoadedSequence>& seqs, int frames, int stride,
                                      bool foreground_only)
{
    std::vector<ClipRef> out;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        const auto& s = seqs[i];
        for (int start : window_starts(static_cast<int>(s.frames.size()), frames, stride, false)) {
            if (foreground_only) {
                bool all_fg = true;
                for (int t = 0; t < frames && all_fg; ++t) {
                    const auto& d = s.masks[start + t].data;
                    all_fg = std::any_of(d.begin(), d.end(), [](float v) { return v > 0; });
                }
                if (!all_fg) continue;
            }
            out.push_back({static_cast<int>(i), start});
        }
    }
    return out;
}

std::vector<ClipRef> eval_windows(const std::vector<LoadedSequence>& seqs, int frames)
{
    std::vector<ClipRef> out;
    for (std::size_t i = 0; i < seqs.size(); ++i) {
        for (int start : window_starts(static_cast<int>(seqs[i].frames.size()), frames, frames, true)) {
            out.push_back({static_cast<int>(i), start});
        }
    }
    return out;
}

ClipBatch make_batch(const std::vector<LoadedSequence>& seqs, const std::vector<ClipRef>& refs, int frames)
{
    if (refs.empty()) throw std::invalid_argument("make_batch: no clips");
    const auto& first = seqs.at(refs[0].sequence).frames.at(0);
    const int c = first.channels, h = first.height, w = first.width;
    const auto b = static_cast<std::int64_t>(refs.size());
    bool masks = true;
    for (const auto& r : refs) masks = masks && !seqs.at(r.sequence).masks.empty();
    std::vector<float> fdata, mdata;
    fdata.reserve(static_cast<std::size_t>(b) * frames * c * h * w);
    for (const auto& r : refs) {
        const auto& s = seqs.at(r.sequence);
        for (int t = 0; t < frames; ++t) {
            const auto& f = s.frames.at(r.start + t);
            if (f.channels != c || f.height != h || f.width != w) throw ShapeError("make_batch: frame sizes differ");
            fdata.insert(fdata.end(), f.data.begin(), f.data.end());
            if (masks) mdata.insert(mdata.end(), s.masks[r.start + t].data.begin(), s.masks[r.start + t].data.end());
        }
    }
    ClipBatch batch;
    batch.frames = Tensor::from_vector({b, frames, c, h, w}, std::move(fdata));
    if (masks) batch.masks = Tensor::from_vector({b, frames, 1, h, w}, std::move(mdata));
    return batch;
}

// ---------------------------------------------------------------------------------------------
// synthetic videos

void SyntheticVideoSpec::validate() const
{
    auto fail = [](const std::string& m) { throw std::invalid_argument("synthetic spec: " + m); };
    if (sequences < 1 || frames_per_sequence < 1) fail("sequence and frame counts must be positive");
    if (height < 8 || width < 8) fail("size must be at least 8x8");
    if (ellipses < 1) fail("need at least one ellipse");
    if (!(radius_min > 0) || radius_max < radius_min) fail("radius range must satisfy 0 < min <= max");
    if (drift_min < 0 || drift_max < drift_min) fail("drift range must satisfy 0 <= min <= max");
    if (deformation < 0 || deformation >= 0.5) fail("deformation must be in [0, 0.5)");
    if (noise < 0) fail("noise must be nonnegative");
    const double reach = radius_max * std::min(height, width) * (1 + deformation) + 1;
    if (2 * reach >= std::min(height, width)) fail("ellipses do not fit inside the frame; lower radius_max");
}

namespace {

struct EllipseTrack {
    double cx, cy, rx, ry, angle, vx, vy, phase, omega;
};

struct SequenceLook {
    double background, gradient, contrast;
};

std::vector<EllipseTrack> tracks_for(const SyntheticVideoSpec& spec, int sequence)
{
    Rng rng(stable_hash("ellipses/" + std::to_string(sequence), spec.seed));
    const double side = std::min(spec.height, spec.width);
    std::vector<EllipseTrack> out;
    for (int k = 0; k < spec.ellipses; ++k) {
        EllipseTrack e{};
        e.rx = rng.uniform(spec.radius_min, spec.radius_max) * side;
        e.ry = rng.uniform(spec.radius_min, spec.radius_max) * side;
        e.angle = rng.uniform(0, 3.141592653589793);
        const double reach = std::max(e.rx, e.ry) * (1 + spec.deformation) + 1;
        e.cx = rng.uniform(reach, spec.width - reach);
        e.cy = rng.uniform(reach, spec.height - reach);
        const double speed = rng.uniform(spec.drift_min, spec.drift_max);
        const double dir = rng.uniform(0, 2 * 3.141592653589793);
        e.vx = speed * std::cos(dir);
        e.vy = speed * std::sin(dir);
        e.phase = rng.uniform(0, 2 * 3.141592653589793);
        e.omega = rng.uniform(0.3, 0.9);
        out.push_back(e);
    }
    return out;
}

SequenceLook look_for(const SyntheticVideoSpec& spec, int sequence)
{
    Rng rng(stable_hash("look/" + std::to_string(sequence), spec.seed));
    SequenceLook l{};
    l.background = rng.uniform(0.15, 0.45);
    l.gradient = rng.uniform(-0.1, 0.1);
    l.contrast = rng.uniform(0.25, 0.45);
    return l;
}

}  // namespace

std::vector<Ellipse> synth_ellipses(const SyntheticVideoSpec& spec, int sequence, int frame)
{
    std::vector<Ellipse> out;
    for (auto e : tracks_for(spec, sequence)) {
        const double reach = std::max(e.rx, e.ry) * (1 + spec.deformation) + 1;
        // integrate the drift, reflecting off the walls so the ellipse stays inside
        for (int f = 0; f < frame; ++f) {
            e.cx += e.vx;
            e.cy += e.vy;
            if (e.cx < reach) e.cx = 2 * reach - e.cx, e.vx = -e.vx;
            if (e.cx > spec.width - reach) e.cx = 2 * (spec.width - reach) - e.cx, e.vx = -e.vx;
            if (e.cy < reach) e.cy = 2 * reach - e.cy, e.vy = -e.vy;
            if (e.cy > spec.height - reach) e.cy = 2 * (spec.height - reach) - e.cy, e.vy = -e.vy;
        }
        const double wobble = spec.deformation * std::sin(e.omega * frame + e.phase);
        out.push_back({e.cx, e.cy, e.rx * (1 + wobble), e.ry * (1 - wobble), e.angle});
    }
    return out;
}

bool ellipse_contains(const Ellipse& e, double px, double py)
{
    const double dx = px - e.cx, dy = py - e.cy;
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    const double u = (dx * c + dy * s) / e.rx, v = (-dx * s + dy * c) / e.ry;
    return u * u + v * v <= 1.0;
}

std::pair<Image, Image> synth_render(const SyntheticVideoSpec& spec, int sequence, int frame)
{
    const auto look = look_for(spec, sequence);
    const auto shapes = synth_ellipses(spec, sequence, frame);
    Rng noise(stable_hash("noise/" + std::to_string(sequence) + "/" + std::to_string(frame), spec.seed));
    Image mask(1, spec.height, spec.width), rgb(3, spec.height, spec.width);
    for (int y = 0; y < spec.height; ++y) {
        for (int x = 0; x < spec.width; ++x) {
            bool inside = false;
            for (const auto& e : shapes) inside = inside || ellipse_contains(e, x + 0.5, y + 0.5);
            double v = look.background + look.gradient * (x / static_cast<double>(spec.width) - 0.5);
            if (inside) v += look.contrast;
            if (spec.noise > 0) v += spec.noise * noise.normal();
            for (int c = 0; c < 3; ++c) rgb.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            mask.at(0, y, x) = inside ? 1.0f : 0.0f;
        }
    }
    return {rgb, mask};
}

ClipBatch synth_batch(const SyntheticVideoSpec& spec, int clips, int frames)
{
    spec.validate();
    std::vector<LoadedSequence> seqs;
    std::vector<ClipRef> refs;
    for (int b = 0; b < clips; ++b) {
        LoadedSequence seq;
        for (int f = 0; f < frames; ++f) {
            auto [rgb, mask] = synth_render(spec, b, f);
            seq.frames.push_back(std::move(rgb));
            seq.masks.push_back(std::move(mask));
        }
        seqs.push_back(std::move(seq));
        refs.push_back({b, 0});
    }
    return make_batch(seqs, refs, frames);
}

DatasetManifest synth_generate(const SyntheticVideoSpec& spec, const fs::path& out_dir)
{
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    DatasetManifest m;
    m.root = out_dir.string();
    m.seed = spec.seed;
    char name[32];
    for (int s = 0; s < spec.sequences; ++s) {
        std::snprintf(name, sizeof name, "seq_%03d", s);
        SequenceEntry entry;
        entry.id = name;
        const auto dir = out_dir / name;
        fs::create_directories(dir / "frames", ec);
        if (!ec) fs::create_directories(dir / "masks", ec);
        if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
        for (int f = 0; f < spec.frames_per_sequence; ++f) {
            const auto [rgb, mask] = synth_render(spec, s, f);
            char file[32];
            std::snprintf(file, sizeof file, "%04d.png", f);
            write_png(dir / "frames" / file, rgb);
            write_png(dir / "masks" / file, mask);
            entry.frames.push_back(std::string(name) + "/frames/" + file);
            entry.masks.push_back(std::string(name) + "/masks/" + file);
        }
        m.sequences.push_back(std::move(entry));
    }

    assign_splits(m);
    auto stored = m;
    stored.root = ".";
    write_manifest(out_dir / "manifest.json", stored);
    return m;
}

}  // namespace funet
