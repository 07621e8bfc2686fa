#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "nervdiff/checkpoint.hpp"
#include "nervdiff/png_io.hpp"
#include "nervdiff/random.hpp"
#include "nervdiff/video.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

using namespace nervdiff;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("nervdiff_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("patchify counts and dims") {
    VideoClip desk;
    desk.pixels = Tensor<float>({8, 32, 32, 3});
    auto seq = patchify(desk, {4, 4, 1});
    CHECK(seq.count() == 512);
    CHECK(seq.patches.shape() == Shape{512, 48});

    VideoClip paper;
    paper.pixels = Tensor<float>({16, 128, 128, 3});
    auto pseq = patchify(paper, {8, 8, 1});
    CHECK(pseq.count() == 4096);
    CHECK(pseq.patches.shape() == Shape{4096, 192});

    CHECK_THROWS_AS(patchify(desk, {5, 4, 1}), std::invalid_argument);
}

TEST_CASE("patchify/unpatchify exact inverse over random shapes") {
    RngStream rng(21);
    const Index dims[][6] = {
        {8, 32, 32, 4, 4, 1}, {4, 16, 24, 4, 8, 2}, {6, 12, 12, 3, 3, 3}, {2, 8, 8, 8, 8, 1},
    };
    for (auto& d : dims) {
        VideoClip clip;
        clip.pixels = rng.uniform_tensor<float>({d[0], d[1], d[2], 3}, -1.0, 1.0);
        auto seq = patchify(clip, {d[3], d[4], d[5]});
        Tensor<float> back = unpatchify(seq, {d[0], d[1], d[2]});
        CHECK(back.size() == clip.pixels.size());
        CHECK(std::memcmp(back.data(), clip.pixels.data(), sizeof(float) * back.size()) == 0);
    }
}

TEST_CASE("synth corpus cardinality, labels, range, determinism") {
    auto corpus = synth_corpus(8, 8, 1, {8, 32, 32});
    CHECK(corpus.size() == 8);
    for (int i = 0; i < 8; ++i) {
        CHECK(corpus[i].class_id == i);
        CHECK(corpus[i].pixels.all_finite());
        CHECK(corpus[i].pixels.array().maxCoeff() <= 1.0f);
        CHECK(corpus[i].pixels.array().minCoeff() >= -1.0f);
    }
    auto again = synth_corpus(8, 8, 1, {8, 32, 32});
    for (int i = 0; i < 8; ++i)
        CHECK(std::memcmp(corpus[i].pixels.data(), again[i].pixels.data(),
                          sizeof(float) * corpus[i].pixels.size()) == 0);
    auto other = synth_corpus(8, 8, 2, {8, 32, 32});
    CHECK(std::memcmp(corpus[0].pixels.data(), other[0].pixels.data(),
                      sizeof(float) * corpus[0].pixels.size()) != 0);

    CHECK_THROWS_AS(synth_corpus(8, 9, 1, {8, 32, 32}), std::invalid_argument);
}

TEST_CASE("translating square moves linearly (centroid oracle)") {
    // class 0 is the translating square archetype
    auto corpus = synth_corpus(16, 8, 5, {8, 32, 32});
    for (int i : {0, 8}) {
        auto c = object_centroids(corpus[static_cast<size_t>(i)]);
        double vx = (c.back().first - c.front().first) / 7.0;
        double vy = (c.back().second - c.front().second) / 7.0;
        CHECK(std::hypot(vx, vy) > 0.3);  // object actually moves
        for (int k = 0; k < 8; ++k) {
            CHECK(std::abs(c[static_cast<size_t>(k)].first - (c[0].first + vx * k)) <= 1.0);
            CHECK(std::abs(c[static_cast<size_t>(k)].second - (c[0].second + vy * k)) <= 1.0);
        }
    }
}

TEST_CASE("png round trip preserves bytes") {
    auto dir = temp_dir("png");
    ImageU8 img;
    img.height = 5;
    img.width = 7;
    img.rgb.resize(5 * 7 * 3);
    for (size_t i = 0; i < img.rgb.size(); ++i) img.rgb[i] = static_cast<uint8_t>((i * 37) % 256);
    write_png_rgb8((dir / "x.png").string(), img);
    auto back = read_png_rgb8((dir / "x.png").string());
    CHECK(back.height == 5);
    CHECK(back.width == 7);
    CHECK(back.rgb == img.rgb);
}

TEST_CASE("load_video: mid-gray frames map to ~0.0039") {
    auto dir = temp_dir("gray");
    ImageU8 img;
    img.height = 8;
    img.width = 8;
    img.rgb.assign(8 * 8 * 3, 128);
    for (int k = 0; k < 4; ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", k);
        write_png_rgb8((dir / name).string(), img);
    }
    std::ofstream(dir / "manifest.txt") << "class_id=2\nfps=8\nnum_frames=4\n";
    VideoClip clip = load_video(dir.string());
    CHECK(clip.frames() == 4);
    CHECK(clip.class_id == 2);
    for (Index i = 0; i < clip.pixels.size(); ++i)
        CHECK(clip.pixels[i] == doctest::Approx(0.0039).epsilon(0.01));
}

TEST_CASE("save/load round trip gives identical 8-bit values") {
    auto corpus = synth_corpus(1, 1, 9, {4, 16, 16});
    auto dir1 = temp_dir("rt1"), dir2 = temp_dir("rt2");
    save_video(dir1.string(), corpus[0]);
    VideoClip loaded = load_video(dir1.string());
    save_video(dir2.string(), loaded);
    for (int k = 0; k < 4; ++k) {
        char name[32];
        std::snprintf(name, sizeof(name), "frame_%04d.png", k);
        CHECK(slurp(dir1 / name) == slurp(dir2 / name));
    }
}

TEST_CASE("load_video distinct error kinds") {
    auto corpus = synth_corpus(1, 1, 3, {4, 16, 16});

    {  // frame count != manifest T
        auto dir = temp_dir("count");
        save_video(dir.string(), corpus[0]);
        std::ofstream(dir / "manifest.txt") << "class_id=0\nfps=8\nnum_frames=5\n";
        try {
            load_video(dir.string());
            CHECK(false);
        } catch (const VideoIoError& e) {
            CHECK(e.kind == VideoIoError::Kind::frame_count_mismatch);
        }
    }
    {  // missing frame index
        auto dir = temp_dir("missing");
        save_video(dir.string(), corpus[0]);
        fs::remove(dir / "frame_0002.png");
        fs::copy(dir / "frame_0001.png", dir / "frame_0005.png");  // keep the count equal
        try {
            load_video(dir.string());
            CHECK(false);
        } catch (const VideoIoError& e) {
            CHECK(e.kind == VideoIoError::Kind::missing_frame);
        }
    }
    {  // frame size mismatch
        auto dir = temp_dir("size");
        save_video(dir.string(), corpus[0]);
        ImageU8 small;
        small.height = 8;
        small.width = 8;
        small.rgb.assign(8 * 8 * 3, 0);
        write_png_rgb8((dir / "frame_0003.png").string(), small);
        try {
            load_video(dir.string());
            CHECK(false);
        } catch (const VideoIoError& e) {
            CHECK(e.kind == VideoIoError::Kind::size_mismatch);
        }
    }
    {  // malformed manifest
        auto dir = temp_dir("manifest");
        save_video(dir.string(), corpus[0]);
        std::ofstream(dir / "manifest.txt") << "class_id=0\nfps eight\nnum_frames=4\n";
        try {
            load_video(dir.string());
            CHECK(false);
        } catch (const VideoIoError& e) {
            CHECK(e.kind == VideoIoError::Kind::bad_manifest);
        }
    }
}

TEST_CASE("checkpoint: empty container is a 16-byte header-only file") {
    auto dir = temp_dir("ckpt_empty");
    CheckpointContainer c;
    c.save((dir / "empty.nrvd").string());
    CHECK(fs::file_size(dir / "empty.nrvd") == 16);
    auto back = CheckpointContainer::load((dir / "empty.nrvd").string());
    CHECK(back.size() == 0);
}

TEST_CASE("checkpoint: bit-exact round trip") {
    auto dir = temp_dir("ckpt_rt");
    CheckpointContainer c;
    c.add("pi", Tensor<float>::full({1}, 3.14f));
    RngStream rng(33);
    Tensor<float> big = rng.normal_tensor<float>({3, 5, 2}, 123.456);
    big[0] = 1e-40f;  // denormal survives too
    c.add("weights/big", big);
    c.save((dir / "c.nrvd").string());

    auto back = CheckpointContainer::load((dir / "c.nrvd").string());
    CHECK(back.size() == 2);
    CHECK(back.get("pi")[0] == 3.14f);
    const auto& b = back.get("weights/big");
    CHECK(b.shape() == Shape{3, 5, 2});
    CHECK(std::memcmp(b.data(), big.data(), sizeof(float) * big.size()) == 0);

    // saving the loaded container reproduces the file byte for byte
    back.save((dir / "c2.nrvd").string());
    CHECK(slurp(dir / "c.nrvd") == slurp(dir / "c2.nrvd"));
}

TEST_CASE("checkpoint: corrupt inputs raise distinct errors") {
    auto dir = temp_dir("ckpt_bad");
    CheckpointContainer c;
    c.add("x", Tensor<float>::full({4}, 1.0f));
    auto path = (dir / "c.nrvd").string();
    c.save(path);

    std::string bytes = slurp(path);
    {  // truncated payload
        std::ofstream out(dir / "trunc.nrvd", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 6));
        out.close();
        try {
            CheckpointContainer::load((dir / "trunc.nrvd").string());
            CHECK(false);
        } catch (const CheckpointError& e) {
            CHECK(e.kind == CheckpointError::Kind::truncated);
        }
    }
    {  // bad magic
        std::string mutated = bytes;
        mutated[0] = 'X';
        std::ofstream(dir / "magic.nrvd", std::ios::binary) << mutated;
        try {
            CheckpointContainer::load((dir / "magic.nrvd").string());
            CHECK(false);
        } catch (const CheckpointError& e) {
            CHECK(e.kind == CheckpointError::Kind::bad_magic);
        }
    }
    {  // unsupported version
        std::string mutated = bytes;
        mutated[4] = 99;
        std::ofstream(dir / "ver.nrvd", std::ios::binary) << mutated;
        try {
            CheckpointContainer::load((dir / "ver.nrvd").string());
            CHECK(false);
        } catch (const CheckpointError& e) {
            CHECK(e.kind == CheckpointError::Kind::bad_version);
        }
    }
    CHECK_THROWS_AS(c.add("x", Tensor<float>::zeros({1})), CheckpointError);
    CHECK_THROWS_AS(CheckpointContainer::load((dir / "nope.nrvd").string()), CheckpointError);
}

TEST_CASE("checkpoint blob encoding round trip") {
    CheckpointContainer c;
    RngStream rng(55);
    std::string state = rng.serialize();
    c.add_blob("state/rng", state);
    CHECK(c.get_blob("state/rng") == state);
}

TEST_CASE("clip chw conversions invert") {
    RngStream rng(77);
    Tensor<float> thwc = rng.uniform_tensor<float>({3, 4, 5, 3}, -1.0, 1.0);
    auto chw = clip_to_chw(thwc);
    CHECK(chw.shape() == Shape{3, 3, 4, 5});
    auto back = chw_to_clip(chw);
    CHECK(std::memcmp(back.data(), thwc.data(), sizeof(float) * thwc.size()) == 0);
}
