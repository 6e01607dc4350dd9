#include <gtest/gtest.h>

#include <filesystem>

#include "dollar/error.hpp"
#include "dollar/harness/datasets.hpp"
#include "dollar/latentspace/codec.hpp"
#include "dollar/netcore/gradcheck.hpp"

using namespace dollar;

namespace {

/// One trained codec shared by the suite (training takes a few seconds).
const CodecTrainResult& trained() {
    static const CodecTrainResult r = [] {
        const ToyDataset train = gen_sprites8(1, 4096);
        const ToyDataset held = gen_sprites8(2, 512);
        CodecConfig cfg;
        cfg.seed = 3;
        return pretrain_codec(train.x, held.x, cfg);
    }();
    return r;
}

}  // namespace

TEST(IdentityCodec, EncodeDecodeAreBitExact) {
    const LatentCodec c = LatentCodec::identity(2);
    Rng rng(1);
    const Tensor x = rng.normal({5, 2});
    EXPECT_EQ(c.encode(x), x);
    EXPECT_EQ(c.decode(x), x);
    EXPECT_TRUE(c.frozen());
    EXPECT_DOUBLE_EQ(c.compression_factor(), 1.0);
    EXPECT_TRUE(c.parameters().empty());
}

TEST(IdentityCodec, VarPathKeepsGradient) {
    const LatentCodec c = LatentCodec::identity(3);
    Var x = Var::parameter(Tensor({2, 3}, 1.0));
    backward(ops::sum(c.decode(c.encode(x))));
    EXPECT_EQ(x.grad(), Tensor({2, 3}, 1.0));
}

TEST(Autoencoder, ShapesAndCompression) {
    const LatentCodec c = LatentCodec::autoencoder(CodecConfig{}, 1);
    EXPECT_EQ(c.pixel_dim(), 64u);
    EXPECT_EQ(c.latent_dim(), 16u);
    EXPECT_DOUBLE_EQ(c.compression_factor(), 4.0);
    EXPECT_FALSE(c.frozen());
    EXPECT_THROW(c.require_frozen("distill"), ContractViolation);
    EXPECT_EQ(c.encode(Tensor({3, 64})).shape(), (Shape{3, 16}));
    EXPECT_EQ(c.decode(Tensor({3, 16})).shape(), (Shape{3, 64}));
    EXPECT_THROW(c.encode(Tensor({3, 16})), ContractViolation);
}

TEST(Autoencoder, DecodeGradientMatchesFiniteDifferences) {
    CodecConfig cfg;
    cfg.decoder_hidden = 6;
    LatentCodec c = LatentCodec::autoencoder(cfg, 2);
    Rng rng(2);
    c.freeze(rng.normal({16}), Tensor({16}, 0.7), 0.01, 0.0);
    Var z = Var::parameter(rng.normal({2, 16}));
    const Tensor target = rng.normal({2, 64});
    auto loss = [&] { return ops::mean(ops::square(c.decode(z) - Var::constant(target))); };
    const auto r = gradcheck({z}, loss);
    EXPECT_LT(r.rel_error, 1e-4);
    EXPECT_GT(r.analytic_norm, 0.0);
    // Frozen maps never touch the codec's own parameters.
    EXPECT_TRUE(grads_all_zero(c.parameters()));
}

TEST(Autoencoder, EncodeGradientMatchesFiniteDifferences) {
    LatentCodec c = LatentCodec::autoencoder(CodecConfig{}, 4);
    c.freeze(Tensor({16}), Tensor({16}, 2.0), 0.01, 0.0);
    Rng rng(4);
    Var x = Var::parameter(rng.normal({2, 64}));
    auto loss = [&] { return ops::sum(ops::square(c.encode(x))); };
    EXPECT_LT(gradcheck({x}, loss).rel_error, 1e-4);
}

TEST(Autoencoder, PretrainedCodecMeetsHeldOutThreshold) {
    const auto& r = trained();
    EXPECT_LT(r.heldout_mse, 0.01);
    EXPECT_TRUE(r.usable);
    EXPECT_TRUE(r.codec.frozen());
    EXPECT_DOUBLE_EQ(r.codec.heldout_mse(), r.heldout_mse);
    EXPECT_GT(r.codec.compression_factor(), 1.0);
}

TEST(Autoencoder, TrainingSpriteRoundTripBelowThreshold) {
    const auto& r = trained();
    const ToyDataset train = gen_sprites8(1, 64);
    EXPECT_LT(reconstruction_mse(r.codec, train.x), r.codec.recon_threshold());
}

TEST(Autoencoder, AllZeroImageReconstructsNearZero) {
    EXPECT_LT(reconstruction_mse(trained().codec, Tensor({1, 64})), 0.01);
}

TEST(Autoencoder, LatentsAreStandardized) {
    const auto& r = trained();
    const Tensor z = r.codec.encode(gen_sprites8(1, 4096).x);
    for (std::size_t j = 0; j < 16; ++j) {
        double m = 0.0, s = 0.0;
        for (std::size_t i = 0; i < z.rows(); ++i) {
            m += z.at(i, j);
        }
        m /= static_cast<double>(z.rows());
        for (std::size_t i = 0; i < z.rows(); ++i) {
            s += (z.at(i, j) - m) * (z.at(i, j) - m);
        }
        EXPECT_NEAR(m, 0.0, 1e-9);
        EXPECT_NEAR(std::sqrt(s / static_cast<double>(z.rows())), 1.0, 1e-6);
    }
}

TEST(Autoencoder, UnreachableThresholdMarksCodecUnusable) {
    CodecConfig cfg;
    cfg.steps = 5;
    cfg.threshold = 1e-9;
    const auto r = pretrain_codec(gen_sprites8(5, 64).x, gen_sprites8(6, 32).x, cfg);
    EXPECT_FALSE(r.usable);
    EXPECT_TRUE(r.codec.frozen());
}

TEST(Autoencoder, CheckpointRoundTripIsExact) {
    const auto& r = trained();
    const auto path = (std::filesystem::temp_directory_path() / "dollar_codec_test.json").string();
    save_checkpoint(path, r.codec.to_checkpoint());
    const LatentCodec back = LatentCodec::from_checkpoint(load_checkpoint(path));
    std::filesystem::remove(path);
    EXPECT_EQ(back.hash(), r.codec.hash());
    EXPECT_TRUE(back.frozen());
    EXPECT_DOUBLE_EQ(back.recon_threshold(), 0.01);
    const Tensor x = gen_sprites8(9, 8).x;
    EXPECT_EQ(back.decode(back.encode(x)), r.codec.decode(r.codec.encode(x)));
}

TEST(Autoencoder, EncodeDecodeLeaveParametersUnchanged) {
    const auto& r = trained();
    const auto h = r.codec.hash();
    Var z = Var::parameter(r.codec.encode(gen_sprites8(3, 4).x));
    backward(ops::sum(r.codec.decode(z)));
    EXPECT_EQ(r.codec.hash(), h);
    EXPECT_TRUE(grads_all_zero(r.codec.parameters()));
}
