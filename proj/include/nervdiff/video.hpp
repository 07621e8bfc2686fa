#pragma once

#include "nervdiff/tensor.hpp"

#include <optional>
#include <string>
#include <vector>

namespace nervdiff {

struct ClipGeometry {
    Index frames = 8;
    Index height = 32;
    Index width = 32;
    bool operator==(const ClipGeometry&) const = default;
};

// Pixels in [-1, 1], layout [T, H, W, 3].
struct VideoClip {
    Tensor<float> pixels;
    std::optional<int> class_id;
    std::string source_id;
    double fps = 8.0;

    Index frames() const { return pixels.dim(0); }
    Index height() const { return pixels.dim(1); }
    Index width() const { return pixels.dim(2); }
    ClipGeometry geometry() const { return {frames(), height(), width()}; }
};

struct PatchShape {
    Index h = 4, w = 4, t = 1;
};

struct PatchSequence {
    Tensor<float> patches;  // [P, p_h*p_w*p_t*3]
    Index grid_h = 0, grid_w = 0, grid_t = 0;
    PatchShape patch;
    Index count() const { return grid_h * grid_w * grid_t; }
};

// Raster order: t-major, then row, then column. Within a patch the layout is
// (p_t, p_h, p_w, 3), row-major.
PatchSequence patchify(const VideoClip& clip, PatchShape patch);
Tensor<float> unpatchify(const PatchSequence& seq, ClipGeometry geom);

// Deterministic synthetic corpus; each class is a motion archetype with
// per-video color/velocity jitter. Labels are assigned round-robin.
std::vector<VideoClip> synth_corpus(int num_videos, int num_classes, uint64_t seed, ClipGeometry geom);

// Directory format: frame_0000.png .. frame_{T-1}.png plus manifest.txt with
// key=value lines (class_id, fps, num_frames).
VideoClip load_video(const std::string& dir);
void save_video(const std::string& dir, const VideoClip& clip);

// [T,H,W,3] <-> [T,3,H,W]
Tensor<float> clip_to_chw(const Tensor<float>& thwc);
Tensor<float> chw_to_clip(const Tensor<float>& tchw);

// Intensity-weighted centroid of |frame - background| per frame; the
// background is taken from the frame corners. Used by motion oracles.
std::vector<std::pair<double, double>> object_centroids(const VideoClip& clip);

}  // namespace nervdiff
