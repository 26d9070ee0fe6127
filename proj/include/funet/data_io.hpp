#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "funet/model.hpp"
#include "json.hpp"

namespace funet {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Planar (C,H,W) float image with values in [0,1].
struct Image {
    int channels = 0, height = 0, width = 0;
    std::vector<float> data;

    Image() = default;
    Image(int c, int h, int w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, fill)
    {
    }
    float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
    bool operator==(const Image&) const = default;
};

/// Decodes any 8/16-bit PNG. Gray is replicated when 3 channels are requested; colour is
/// averaged when 1 channel is requested; alpha is dropped.
Image read_png(const std::filesystem::path& path, int channels);
/// Mask PNG: foreground where the (channel-max) value is at least half scale. Values are exactly 0 or 1.
Image read_mask_png(const std::filesystem::path& path);
/// Writes 1- or 3-channel images, 8 or 16 bits per sample (value = round(v * max)).
void write_png(const std::filesystem::path& path, const Image& img, int bit_depth = 8);

/// Resamples the window [y0, y0+ch) x [x0, x0+cw) of `src` to h x w.
Image crop_resize_bilinear(const Image& src, int y0, int x0, int ch, int cw, int h, int w);
Image crop_resize_nearest(const Image& src, int y0, int x0, int ch, int cw, int h, int w);
Image hflip(const Image& src);

/// Bilinear for the frame, nearest for the mask.
std::pair<Image, Image> resize_pair(const Image& frame, const Image& mask, int h, int w);

enum class Split { Train, Val, Test };
std::string split_name(Split s);
Split parse_split(const std::string& name);

struct SequenceEntry {
    std::string id;
    std::vector<std::string> frames;  // relative to the manifest root
    std::vector<std::string> masks;   // empty when the sequence is unlabeled
    Split split = Split::Train;
};

struct DatasetManifest {
    std::string root;
    std::vector<SequenceEntry> sequences;
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{0.65, 0.175, 0.175};
    bool foreground_only = false;  // training keeps only windows whose masks are all non-empty

    std::vector<const SequenceEntry*> in_split(Split s) const;
    std::size_t frame_count(Split s) const;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::filesystem::path& path);

/// Largest-remainder apportionment of n sequences; ties go to the later split.
std::array<int, 3> split_counts(int n, const std::array<double, 3>& ratios);

/// Scans root/<id>/frames/*.png and root/<id>/masks/*.png (lexicographic = temporal order) and
/// assigns whole sequences to splits with a seeded shuffle.
DatasetManifest load_manifest(const std::filesystem::path& root, const std::array<double, 3>& ratios = {0.65, 0.175, 0.175},
                              std::uint64_t seed = 0);
/// Accepts either a dataset root or a manifest.json; a root without a manifest is scanned.
DatasetManifest open_dataset(const std::filesystem::path& path, const std::array<double, 3>& ratios,
                             std::uint64_t seed);

/// Window start indices. With `tail_align` a final window is snapped to the sequence end so no frame is dropped.
std::vector<int> window_starts(int n_frames, int frames, int stride, bool tail_align);

struct LoadedSequence {
    std::string id;
    std::vector<Image> frames;  // (3,h,w)
    std::vector<Image> masks;   // (1,h,w), empty when unlabeled
};

/// Decodes and resizes every sequence in the given splits, in manifest order.
std::vector<LoadedSequence> load_sequences(const DatasetManifest& m, const std::vector<Split>& splits, int h, int w);

struct ClipRef {
    int sequence = 0;
    int start = 0;
};

/// Training windows: stride `stride`, no tail alignment; with `foreground_only` windows with an empty mask are skipped.
std::vector<ClipRef> training_windows(const std::vector<LoadedSequence>& seqs, int frames, int stride,
                                      bool foreground_only);
/// Evaluation windows for one sequence: stride T with the tail aligned.
std::vector<ClipRef> eval_windows(const std::vector<LoadedSequence>& seqs, int frames);

/// Packs the referenced windows into a (B,T,C,H,W) batch; masks included when every sequence has them.
ClipBatch make_batch(const std::vector<LoadedSequence>& seqs, const std::vector<ClipRef>& refs, int frames);

struct SyntheticVideoSpec {
    int sequences = 40;
    int frames_per_sequence = 10;
    int height = 64, width = 112;
    int ellipses = 1;
    double radius_min = 0.10, radius_max = 0.22;  // fraction of the smaller image side
    double drift_min = 0.5, drift_max = 2.0;      // px per frame
    double deformation = 0.08;                    // relative radius oscillation
    double noise = 0.06;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Ellipse {
    double cx, cy, rx, ry, angle;
};

/// Ellipses drawn in frame `frame` of sequence `sequence`.
std::vector<Ellipse> synth_ellipses(const SyntheticVideoSpec& spec, int sequence, int frame);
/// Pixel (x,y) is inside when its centre (x+0.5, y+0.5) lies in the closed ellipse.
bool ellipse_contains(const Ellipse& e, double px, double py);
/// Frame (3,h,w) and exact mask (1,h,w) of one synthetic frame.
std::pair<Image, Image> synth_render(const SyntheticVideoSpec& spec, int sequence, int frame);
/// In-memory batch: clip b holds the first `frames` frames of synthetic sequence b.
ClipBatch synth_batch(const SyntheticVideoSpec& spec, int clips, int frames);
/// Writes root/seq_XXX/{frames,masks}/NNNN.png plus manifest.json (default split ratios, split seed = spec seed).
DatasetManifest synth_generate(const SyntheticVideoSpec& spec, const std::filesystem::path& out_dir);

}  // namespace funet
