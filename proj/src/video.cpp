#include "nervdiff/video.hpp"

#include "nervdiff/errors.hpp"
#include "nervdiff/png_io.hpp"
#include "nervdiff/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace nervdiff {

namespace fs = std::filesystem;

PatchSequence patchify(const VideoClip& clip, PatchShape patch) {
    const Index T = clip.frames(), H = clip.height(), W = clip.width();
    if (H % patch.h || W % patch.w || T % patch.t)
        throw std::invalid_argument("patchify: clip dims not divisible by patch extents");
    PatchSequence seq;
    seq.patch = patch;
    seq.grid_h = H / patch.h;
    seq.grid_w = W / patch.w;
    seq.grid_t = T / patch.t;
    const Index dim = patch.h * patch.w * patch.t * 3;
    seq.patches = Tensor<float>({seq.count(), dim});
    const float* src = clip.pixels.data();
    float* dst = seq.patches.data();
    Index p = 0;
    for (Index pt = 0; pt < seq.grid_t; ++pt)
        for (Index py = 0; py < seq.grid_h; ++py)
            for (Index px = 0; px < seq.grid_w; ++px, ++p) {
                float* d = dst + p * dim;
                for (Index dt = 0; dt < patch.t; ++dt)
                    for (Index dy = 0; dy < patch.h; ++dy)
                        for (Index dx = 0; dx < patch.w; ++dx) {
                            Index t = pt * patch.t + dt;
                            Index y = py * patch.h + dy;
                            Index x = px * patch.w + dx;
                            const float* s = src + ((t * H + y) * W + x) * 3;
                            *d++ = s[0];
                            *d++ = s[1];
                            *d++ = s[2];
                        }
            }
    return seq;
}

Tensor<float> unpatchify(const PatchSequence& seq, ClipGeometry geom) {
    const PatchShape& patch = seq.patch;
    if (seq.grid_h * patch.h != geom.height || seq.grid_w * patch.w != geom.width ||
        seq.grid_t * patch.t != geom.frames)
        throw std::invalid_argument("unpatchify: geometry mismatch");
    Tensor<float> out({geom.frames, geom.height, geom.width, 3});
    const Index dim = patch.h * patch.w * patch.t * 3;
    const float* src = seq.patches.data();
    Index p = 0;
    for (Index pt = 0; pt < seq.grid_t; ++pt)
        for (Index py = 0; py < seq.grid_h; ++py)
            for (Index px = 0; px < seq.grid_w; ++px, ++p) {
                const float* s = src + p * dim;
                for (Index dt = 0; dt < patch.t; ++dt)
                    for (Index dy = 0; dy < patch.h; ++dy)
                        for (Index dx = 0; dx < patch.w; ++dx) {
                            Index t = pt * patch.t + dt;
                            Index y = py * patch.h + dy;
                            Index x = px * patch.w + dx;
                            float* d = out.data() + ((t * geom.height + y) * geom.width + x) * 3;
                            d[0] = *s++;
                            d[1] = *s++;
                            d[2] = *s++;
                        }
            }
    return out;
}

Tensor<float> clip_to_chw(const Tensor<float>& thwc) {
    const Index T = thwc.dim(0), H = thwc.dim(1), W = thwc.dim(2);
    Tensor<float> out({T, 3, H, W});
    for (Index t = 0; t < T; ++t)
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                const float* s = thwc.data() + ((t * H + y) * W + x) * 3;
                for (Index c = 0; c < 3; ++c) out[((t * 3 + c) * H + y) * W + x] = s[c];
            }
    return out;
}

Tensor<float> chw_to_clip(const Tensor<float>& tchw) {
    const Index T = tchw.dim(0), H = tchw.dim(2), W = tchw.dim(3);
    Tensor<float> out({T, H, W, 3});
    for (Index t = 0; t < T; ++t)
        for (Index c = 0; c < 3; ++c)
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x)
                    out[((t * H + y) * W + x) * 3 + c] = tchw[((t * 3 + c) * H + y) * W + x];
    return out;
}

// ---------------------------------------------------------------------------
// synthetic corpus

namespace {

struct Rgb {
    float r, g, b;
};

float soft_mask(double sdf, double edge = 1.2) {
    double v = 0.5 - sdf / edge;
    return static_cast<float>(std::clamp(v, 0.0, 1.0));
}

double box_sdf(double dx, double dy, double half_w, double half_h) {
    double qx = std::abs(dx) - half_w;
    double qy = std::abs(dy) - half_h;
    double ox = std::max(qx, 0.0), oy = std::max(qy, 0.0);
    return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0);
}

// One archetype renderer per class id (mod 8). Pixel (x, y) at frame k.
struct SynthParams {
    int archetype;
    Rgb bg, fg;
    double cx, cy;       // start center
    double vx, vy;       // velocity, px/frame
    double size;         // object scale, px
    double omega, phase; // angular rate / phase
};

float archetype_mask(const SynthParams& sp, int k, double x, double y, Index W, Index H) {
    double t = static_cast<double>(k);
    switch (sp.archetype) {
        case 0: {  // translating square
            return soft_mask(box_sdf(x - (sp.cx + sp.vx * t), y - (sp.cy + sp.vy * t), sp.size, sp.size));
        }
        case 1: {  // bouncing circle (reflect off walls)
            double margin = sp.size + 2.0;
            double span_x = static_cast<double>(W) - 2 * margin;
            double span_y = static_cast<double>(H) - 2 * margin;
            auto reflect = [](double p, double span) {
                double m = std::fmod(p, 2 * span);
                if (m < 0) m += 2 * span;
                return m <= span ? m : 2 * span - m;
            };
            double px = margin + reflect(sp.cx - margin + sp.vx * t, span_x);
            double py = margin + reflect(sp.cy - margin + sp.vy * t, span_y);
            double d = std::hypot(x - px, y - py) - sp.size;
            return soft_mask(d);
        }
        case 2: {  // rotating bar
            double ang = sp.phase + sp.omega * t;
            double ca = std::cos(ang), sa = std::sin(ang);
            double rx = ca * (x - sp.cx) + sa * (y - sp.cy);
            double ry = -sa * (x - sp.cx) + ca * (y - sp.cy);
            return soft_mask(box_sdf(rx, ry, sp.size * 2.2, sp.size * 0.45));
        }
        case 3: {  // expanding ring
            double r0 = sp.size * (0.5 + 0.9 * t / 8.0);
            double d = std::abs(std::hypot(x - sp.cx, y - sp.cy) - r0) - sp.size * 0.3;
            return soft_mask(d);
        }
        case 4: {  // orbiting dot
            double ang = sp.phase + sp.omega * t;
            double px = sp.cx + sp.size * 2.0 * std::cos(ang);
            double py = sp.cy + sp.size * 2.0 * std::sin(ang);
            return soft_mask(std::hypot(x - px, y - py) - sp.size * 0.7);
        }
        case 5: {  // scrolling stripes
            double v = std::sin((x * sp.omega + y * 0.12 + sp.phase + sp.vx * t) * 2.0);
            return static_cast<float>(0.5 + 0.5 * v);
        }
        case 6: {  // pulsing blob
            double r = sp.size * (1.0 + 0.45 * std::sin(sp.phase + sp.omega * t));
            double d2 = (x - sp.cx) * (x - sp.cx) + (y - sp.cy) * (y - sp.cy);
            return static_cast<float>(std::exp(-d2 / (2.0 * r * r)));
        }
        default: {  // drifting cross
            double px = sp.cx + sp.vx * t, py = sp.cy + sp.vy * t;
            double d = std::min(box_sdf(x - px, y - py, sp.size * 1.6, sp.size * 0.5),
                                box_sdf(x - px, y - py, sp.size * 0.5, sp.size * 1.6));
            return soft_mask(d);
        }
    }
}

Rgb random_color(RngStream& rng, double lo, double hi) {
    return {static_cast<float>(rng.uniform_in(lo, hi)), static_cast<float>(rng.uniform_in(lo, hi)),
            static_cast<float>(rng.uniform_in(lo, hi))};
}

}  // namespace

std::vector<VideoClip> synth_corpus(int num_videos, int num_classes, uint64_t seed, ClipGeometry geom) {
    if (num_classes > num_videos)
        throw std::invalid_argument("synth_corpus: num_classes must be <= num_videos");
    RngStream root(seed);
    std::vector<VideoClip> corpus;
    corpus.reserve(static_cast<size_t>(num_videos));
    const Index T = geom.frames, H = geom.height, W = geom.width;
    for (int i = 0; i < num_videos; ++i) {
        RngStream rng = root.fork(static_cast<uint64_t>(i) + 1);
        int cls = i % num_classes;
        SynthParams sp;
        sp.archetype = cls % 8;
        sp.bg = random_color(rng, -0.85, -0.25);
        sp.fg = random_color(rng, 0.15, 0.9);
        sp.size = static_cast<double>(W) * rng.uniform_in(0.11, 0.16);
        double ang = rng.uniform_in(0.0, 6.283185307179586);
        double speed = rng.uniform_in(0.6, 1.4);
        sp.vx = speed * std::cos(ang);
        sp.vy = speed * std::sin(ang);
        sp.omega = rng.uniform_in(0.28, 0.5) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
        sp.phase = rng.uniform_in(0.0, 6.283185307179586);
        // keep translating objects fully inside the frame over all T frames
        double travel = speed * static_cast<double>(T - 1);
        double margin = sp.size * 2.6 + 2.5;
        double cx0 = static_cast<double>(W) / 2 - sp.vx * static_cast<double>(T - 1) / 2;
        double cy0 = static_cast<double>(H) / 2 - sp.vy * static_cast<double>(T - 1) / 2;
        (void)travel;
        sp.cx = std::clamp(cx0, margin, static_cast<double>(W) - margin);
        sp.cy = std::clamp(cy0, margin, static_cast<double>(H) - margin);
        if (sp.archetype == 5) sp.omega = rng.uniform_in(0.25, 0.45);

        VideoClip clip;
        clip.class_id = cls;
        clip.source_id = "clip_" + std::to_string(i);
        clip.pixels = Tensor<float>({T, H, W, 3});
        for (Index k = 0; k < T; ++k)
            for (Index y = 0; y < H; ++y)
                for (Index x = 0; x < W; ++x) {
                    float m = archetype_mask(sp, static_cast<int>(k), static_cast<double>(x),
                                             static_cast<double>(y), W, H);
                    float* px = clip.pixels.data() + ((k * H + y) * W + x) * 3;
                    px[0] = sp.bg.r + (sp.fg.r - sp.bg.r) * m;
                    px[1] = sp.bg.g + (sp.fg.g - sp.bg.g) * m;
                    px[2] = sp.bg.b + (sp.fg.b - sp.bg.b) * m;
                }
        corpus.push_back(std::move(clip));
    }
    return corpus;
}

std::vector<std::pair<double, double>> object_centroids(const VideoClip& clip) {
    const Index T = clip.frames(), H = clip.height(), W = clip.width();
    std::vector<std::pair<double, double>> out;
    out.reserve(static_cast<size_t>(T));
    for (Index k = 0; k < T; ++k) {
        // background estimate: mean of the four corner pixels
        double bg[3] = {0, 0, 0};
        const Index corners[4][2] = {{0, 0}, {0, W - 1}, {H - 1, 0}, {H - 1, W - 1}};
        for (auto& c : corners) {
            const float* p = clip.pixels.data() + ((k * H + c[0]) * W + c[1]) * 3;
            for (int ch = 0; ch < 3; ++ch) bg[ch] += p[ch] / 4.0;
        }
        double wsum = 0, xsum = 0, ysum = 0;
        for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x) {
                const float* p = clip.pixels.data() + ((k * H + y) * W + x) * 3;
                double wgt = (std::abs(p[0] - bg[0]) + std::abs(p[1] - bg[1]) + std::abs(p[2] - bg[2])) / 3.0;
                wsum += wgt;
                xsum += wgt * static_cast<double>(x);
                ysum += wgt * static_cast<double>(y);
            }
        if (wsum <= 1e-9)
            out.emplace_back(static_cast<double>(W) / 2, static_cast<double>(H) / 2);
        else
            out.emplace_back(xsum / wsum, ysum / wsum);
    }
    return out;
}

// ---------------------------------------------------------------------------
// disk format

namespace {

std::string frame_name(Index i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04lld.png", static_cast<long long>(i));
    return buf;
}

std::map<std::string, std::string> parse_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw VideoIoError(VideoIoError::Kind::bad_manifest, "missing manifest: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw VideoIoError(VideoIoError::Kind::bad_manifest, "malformed manifest line: " + line);
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

long manifest_long(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end())
        throw VideoIoError(VideoIoError::Kind::bad_manifest, "manifest missing key: " + key);
    try {
        size_t pos = 0;
        long v = std::stol(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("");
        return v;
    } catch (...) {
        throw VideoIoError(VideoIoError::Kind::bad_manifest, "manifest value not an integer: " + key);
    }
}

double manifest_double(const std::map<std::string, std::string>& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end())
        throw VideoIoError(VideoIoError::Kind::bad_manifest, "manifest missing key: " + key);
    try {
        return std::stod(it->second);
    } catch (...) {
        throw VideoIoError(VideoIoError::Kind::bad_manifest, "manifest value not a number: " + key);
    }
}

}  // namespace

VideoClip load_video(const std::string& dir) {
    auto kv = parse_manifest(dir + "/manifest.txt");
    long T = manifest_long(kv, "num_frames");
    long cls = manifest_long(kv, "class_id");
    double fps = manifest_double(kv, "fps");
    if (T < 1) throw VideoIoError(VideoIoError::Kind::bad_manifest, "num_frames must be >= 1");

    // count frame files to detect surplus frames beyond the manifest count
    Index on_disk = 0;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string n = e.path().filename().string();
        if (n.rfind("frame_", 0) == 0 && n.size() == 14 && n.substr(10) == ".png") ++on_disk;
    }
    if (on_disk != static_cast<Index>(T))
        throw VideoIoError(VideoIoError::Kind::frame_count_mismatch,
                           "frame count on disk (" + std::to_string(on_disk) +
                               ") != manifest num_frames (" + std::to_string(T) + ")");

    VideoClip clip;
    clip.fps = fps;
    if (cls >= 0) clip.class_id = static_cast<int>(cls);
    clip.source_id = fs::path(dir).filename().string();
    Index H = 0, W = 0;
    for (Index k = 0; k < static_cast<Index>(T); ++k) {
        std::string fpath = dir + "/" + frame_name(k);
        if (!fs::exists(fpath))
            throw VideoIoError(VideoIoError::Kind::missing_frame, "missing frame: " + fpath);
        ImageU8 img = read_png_rgb8(fpath);
        if (k == 0) {
            H = img.height;
            W = img.width;
            clip.pixels = Tensor<float>({static_cast<Index>(T), H, W, 3});
        } else if (img.height != H || img.width != W) {
            throw VideoIoError(VideoIoError::Kind::size_mismatch, "frame size mismatch: " + fpath);
        }
        float* dst = clip.pixels.data() + k * H * W * 3;
        for (size_t i = 0; i < img.rgb.size(); ++i)
            dst[i] = static_cast<float>(img.rgb[i]) / 127.5f - 1.0f;
    }
    return clip;
}

void save_video(const std::string& dir, const VideoClip& clip) {
    fs::create_directories(dir);
    const Index T = clip.frames(), H = clip.height(), W = clip.width();
    ImageU8 img;
    img.height = H;
    img.width = W;
    img.rgb.resize(static_cast<size_t>(H) * W * 3);
    for (Index k = 0; k < T; ++k) {
        const float* src = clip.pixels.data() + k * H * W * 3;
        for (size_t i = 0; i < img.rgb.size(); ++i) {
            float v = (src[i] + 1.0f) * 127.5f;
            img.rgb[i] = static_cast<uint8_t>(std::clamp(std::lround(v), 0l, 255l));
        }
        write_png_rgb8(dir + "/" + frame_name(k), img);
    }
    std::ofstream mf(dir + "/manifest.txt");
    mf << "class_id=" << (clip.class_id ? *clip.class_id : -1) << "\n";
    mf << "fps=" << clip.fps << "\n";
    mf << "num_frames=" << T << "\n";
}

}  // namespace nervdiff
