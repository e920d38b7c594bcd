#include <gtest/gtest.h>

#include <filesystem>

#include "strudel/io.hpp"

using namespace strudel;
using namespace strudel::io;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("strudel_io_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                                            "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

backbones::ModelParams<float> small_model(backbones::Kind kind) {
    backbones::BackboneSpec s;
    s.kind = kind;
    s.depth = 2;
    s.base_channels = 4;
    s.dropout_rate = 0.3;
    return backbones::init_model(s, 77);
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir dir;
    for (auto kind : {backbones::Kind::unet, backbones::Kind::octse}) {
        const auto p = small_model(kind);
        save_checkpoint(dir.path / "m.ckpt", p);
        EXPECT_EQ(load_checkpoint(dir.path / "m.ckpt"), p);
    }
}

TEST(Checkpoint, VersionMismatchIsRejected) {
    auto bytes = encode_checkpoint(small_model(backbones::Kind::unet));
    const std::uint32_t other = checkpoint_version + 1;
    std::memcpy(bytes.data() + 8, &other, sizeof other);
    try {
        decode_checkpoint(bytes);
        FAIL() << "expected a version error";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
    }
}

TEST(Checkpoint, CorruptionIsRejected) {
    const auto bytes = encode_checkpoint(small_model(backbones::Kind::unet));
    EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 4)), IoError);
    EXPECT_THROW(decode_checkpoint(bytes + "x"), IoError);
    EXPECT_THROW(decode_checkpoint("not a checkpoint"), IoError);
    EXPECT_THROW(load_checkpoint("/nonexistent/m.ckpt"), IoError);
}

TEST(Checkpoint, TensorsMustMatchEmbeddedSpec) {
    auto p = small_model(backbones::Kind::unet);
    p.tensors.front() = nn::Tensor<float>(1, 1, 1, 1);
    EXPECT_THROW(decode_checkpoint(encode_checkpoint(p)), IoError);
}

TEST(Pgm, MaskRoundTripAtBothDepths) {
    Mask m(3, 5);
    m(1, 2) = m(2, 4) = 1;
    EXPECT_EQ(decode_mask_pgm(encode_mask_pgm(m, 8)), m);
    EXPECT_EQ(decode_mask_pgm(encode_mask_pgm(m, 16)), m);
    auto bad = encode_mask_pgm(m, 8);
    bad.back() = 7;
    EXPECT_THROW(decode_mask_pgm(bad), IoError);
}

TEST(Pgm, ImageQuantizationErrorIsBounded) {
    Rng rng(1);
    Image img(6, 7);
    for (auto& v : img) v = rng.uniform(0.2, 0.9);
    const auto [lo, hi] = std::minmax_element(img.begin(), img.end());
    const auto back = decode_image_pgm16(encode_image_pgm16(img, *lo, *hi), *lo, *hi);
    for (std::size_t i = 0; i < img.size(); ++i) EXPECT_LE(std::abs(back[i] - img[i]), (*hi - *lo) / 65535.0);
    EXPECT_THROW(decode_image_pgm16(encode_mask_pgm(Mask(2, 2), 8), 0, 1), IoError);
}

TEST(Pfm, RoundTripAtFloatPrecision) {
    Grid<double> g(4, 3);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = 0.1 * static_cast<double>(i);
    const auto back = decode_pfm(encode_pfm(g));
    for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(back[i], static_cast<double>(static_cast<float>(g[i])));
}

TEST(Manifest, FormatAndParseAreInverse) {
    std::vector<ManifestRecord> r{{"src_00000", "source", "train", "src_00000.pgm", "src_00000_mask.pgm", 0.1, 0.9},
                                  {"tgt_00003", "target", "pool", "tgt_00003.pgm", "", -0.25, 1.0 / 3.0}};
    const auto back = parse_manifest(format_manifest(r));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].mask, "src_00000_mask.pgm");
    EXPECT_TRUE(back[1].mask.empty());
    EXPECT_EQ(back[1].hi, 1.0 / 3.0);
    EXPECT_EQ(back[1].split, "pool");
}

TEST(Manifest, MalformedRecordsNameTheLine) {
    try {
        parse_manifest("# header\nid=a domain=source split=train image=a.pgm lo=0\n");
        FAIL() << "expected a missing-key error";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("hi"), std::string::npos);
    }
    EXPECT_THROW(parse_manifest("id=a oops\n"), IoError);
}

TEST(Dataset, WriteThenReadPreservesSamples) {
    TempDir dir;
    auto c = datasets::DomainConfig::target_defaults();
    c.image_size = 16;
    c.lesion_radius_range = {1.5, 3.0};
    const auto samples = datasets::generate_domain(c, 4);
    write_dataset(dir.path, samples, {"pool", "pool", "eval", "labeled"});
    const auto back = read_dataset(dir.path);
    ASSERT_EQ(back.size(), 4u);
    const auto key = datasets::grant_evaluation_access();
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(back[i].sample.id(), samples[i].id());
        EXPECT_TRUE(back[i].sample.quarantined());
        EXPECT_EQ(back[i].sample.ground_truth(key), samples[i].ground_truth(key));
        for (std::size_t p = 0; p < samples[i].image().size(); ++p)
            EXPECT_NEAR(back[i].sample.image()[p], samples[i].image()[p], 1e-4);
    }
    EXPECT_EQ(select_split(back, "pool").size(), 2u);
    EXPECT_EQ(select_split(back, "labeled").front().id(), samples[3].id());
}

TEST(Dataset, RewriteGivesIdenticalBytes) {
    TempDir dir;
    const auto samples = datasets::generate_domain(datasets::DomainConfig::source_defaults(), 2);
    write_dataset(dir.path / "a", samples, {"train", "train"});
    write_dataset(dir.path / "b", samples, {"train", "train"});
    for (const auto& e : fs::directory_iterator(dir.path / "a"))
        EXPECT_EQ(read_file(e.path()), read_file(dir.path / "b" / e.path().filename())) << e.path();
}
