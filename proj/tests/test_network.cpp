#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "fume/network.hpp"
#include "fume/params.hpp"

using namespace fume;

namespace {

template <typename T>
Tensor<T> random_input(int n, int size, Rng& rng) {
    Tensor<T> t({n, 1, size, size});
    for (auto& v : t.data) v = static_cast<T>(rng.uniform());
    return t;
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ostringstream os;
    os << is.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("parameter count of a lone biased conv") {
    ParamStore<float> store;
    store.add("conv.weight", Tensor<float>::zeros({4, 2, 3, 3}));
    store.add("conv.bias", Tensor<float>::zeros({4}));
    CHECK(store.count_trainable_scalars() == 76);
}

TEST_CASE("variant parameter counts and orderings") {
    auto count = [](Variant v) { return FumeNet<float>(v, 1).count_params(); };
    std::size_t fume = count(Variant::Fume);
    CHECK(fume > static_cast<std::size_t>(1.28e6 * 0.85));
    CHECK(fume < static_cast<std::size_t>(1.28e6 * 1.15));
    CHECK(count(Variant::ClassificationOnly) < count(Variant::SegmentationOnly));
    CHECK(count(Variant::SegmentationOnly) < fume);
    CHECK(fume < count(Variant::FullCrossModalAttn));
    CHECK(count(Variant::Co2Only) == count(Variant::Ch4Only));
    CHECK(count(Variant::Co2Only) < fume);
    // count is invariant to seed
    CHECK(FumeNet<float>(Variant::Fume, 999).count_params() == fume);
}

TEST_CASE("MAC counts at the published input size") {
    FumeNet<float> net(Variant::Fume, 1);
    std::uint64_t macs = net.count_macs(512, 512);
    CHECK(macs > static_cast<std::uint64_t>(1.97e9 * 0.85));
    CHECK(macs < static_cast<std::uint64_t>(1.97e9 * 1.15));
    // single-stream variants encode once instead of twice
    CHECK(FumeNet<float>(Variant::Co2Only, 1).count_macs(512, 512) < macs);
    CHECK(FumeNet<float>(Variant::FullCrossModalAttn, 1).count_macs(512, 512) > macs);
    CHECK_THROWS_AS(net.count_macs(100, 100), ShapeError);
}

TEST_CASE("forward output shapes per variant") {
    Rng rng(3);
    auto co2 = random_input<float>(2, 32, rng);
    auto ch4 = random_input<float>(2, 32, rng);

    FumeNet<float> fume_net(Variant::Fume, 5);
    FumeNet<float>::Pass f;
    fume_net.run(f, co2, ch4, false, false);
    REQUIRE(f.seg_co2 >= 0);
    REQUIRE(f.seg_ch4 >= 0);
    REQUIRE(f.logits >= 0);
    CHECK(f.tape.val(f.seg_co2).shape == Shape{2, 3, 32, 32});
    CHECK(f.tape.val(f.logits).shape == Shape{2, 3});
    CHECK(f.tape.val(f.seg_co2).all_finite());
    CHECK(f.tape.val(f.logits).all_finite());

    FumeNet<float> cls_net(Variant::ClassificationOnly, 5);
    FumeNet<float>::Pass fc;
    cls_net.run(fc, co2, ch4, false, false);
    CHECK(fc.seg_co2 == -1);
    CHECK(fc.seg_ch4 == -1);
    CHECK(fc.logits >= 0);

    FumeNet<float> seg_net(Variant::SegmentationOnly, 5);
    FumeNet<float>::Pass fs;
    seg_net.run(fs, co2, ch4, false, false);
    CHECK(fs.logits == -1);
    CHECK(fs.seg_co2 >= 0);
    CHECK(fs.seg_ch4 >= 0);

    FumeNet<float> ch4_net(Variant::Ch4Only, 5);
    FumeNet<float>::Pass f4;
    Tensor<float> zeros({2, 1, 32, 32});
    ch4_net.run(f4, co2, zeros, false, false);  // all-zero CH4 frames
    CHECK(f4.seg_co2 == -1);
    REQUIRE(f4.seg_ch4 >= 0);
    CHECK(f4.tape.val(f4.seg_ch4).all_finite());
    CHECK(f4.tape.val(f4.logits).all_finite());
}

TEST_CASE("both-absent batches are rejected") {
    Rng rng(4);
    auto x = random_input<float>(1, 32, rng);
    FumeNet<float> net(Variant::Fume, 5);
    FumeNet<float>::Pass f;
    CHECK_THROWS_AS(net.run(f, x, x, false, false, nullptr, false, false), DataError);
}

TEST_CASE("inputs must be N x 1 with extents divisible by 32") {
    FumeNet<float> net(Variant::Fume, 5);
    FumeNet<float>::Pass f;
    Tensor<float> bad_c({1, 2, 32, 32});
    Tensor<float> ok({1, 1, 32, 32});
    CHECK_THROWS_AS(net.run(f, bad_c, ok, false, false), ShapeError);
    Tensor<float> bad_s({1, 1, 48, 48});
    FumeNet<float>::Pass f2;
    CHECK_THROWS_AS(net.run(f2, bad_s, bad_s, false, false), ShapeError);
}

TEST_CASE("gamma gates make attention an exact no-op at initialization") {
    Rng rng(6);
    auto co2 = random_input<float>(1, 32, rng);
    auto ch4 = random_input<float>(1, 32, rng);
    for (Variant v : {Variant::Fume, Variant::FullCrossModalAttn, Variant::SelfAttnOnly}) {
        FumeNet<float> net(v, 7);
        FumeNet<float>::Pass with_attn;
        net.run(with_attn, co2, ch4, false, false);
        net.skip_attention = true;
        FumeNet<float>::Pass without;
        net.run(without, co2, ch4, false, false);
        REQUIRE(with_attn.seg_co2 >= 0);
        CHECK(with_attn.tape.val(with_attn.seg_co2).data ==
              without.tape.val(without.seg_co2).data);
        CHECK(with_attn.tape.val(with_attn.seg_ch4).data ==
              without.tape.val(without.seg_ch4).data);
        CHECK(with_attn.tape.val(with_attn.logits).data ==
              without.tape.val(without.logits).data);
    }
}

TEST_CASE("attention contributes once the gates move off zero") {
    Rng rng(7);
    auto co2 = random_input<float>(1, 32, rng);
    auto ch4 = random_input<float>(1, 32, rng);
    FumeNet<float> net(Variant::Fume, 7);
    FumeNet<float>::Pass before;
    net.run(before, co2, ch4, false, false);
    for (int gi : net.gamma_param_indices()) net.params[gi].value[0] = 0.5f;
    FumeNet<float>::Pass after;
    net.run(after, co2, ch4, false, false);
    CHECK(before.tape.val(before.seg_co2).data != after.tape.val(after.seg_co2).data);
}

TEST_CASE("initialization is deterministic in the seed and shared across variants") {
    FumeNet<float> a(Variant::Fume, 11), b(Variant::Fume, 11), c(Variant::Fume, 12);
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
        if (a.params[static_cast<int>(i)].value.data != b.params[static_cast<int>(i)].value.data)
            all_equal = false;
        if (a.params[static_cast<int>(i)].value.data != c.params[static_cast<int>(i)].value.data)
            any_diff = true;
    }
    CHECK(all_equal);
    CHECK(any_diff);

    // components shared between variants start from identical weights
    FumeNet<float> co2only(Variant::Co2Only, 11);
    int ia = a.params.find("encoder.lds.conv1.weight");
    int ib = co2only.params.find("encoder.lds.conv1.weight");
    REQUIRE(ia >= 0);
    REQUIRE(ib >= 0);
    CHECK(a.params[ia].value.data == co2only.params[ib].value.data);
}

TEST_CASE("self-attn-only keeps attention but drops the channel gates") {
    FumeNet<float> net(Variant::SelfAttnOnly, 3);
    CHECK(net.params.find("attn.co2.gamma") >= 0);
    CHECK(net.params.find("fusion.mlp1.weight") == -1);
    FumeNet<float> fume(Variant::Fume, 3);
    CHECK(fume.params.find("fusion.mlp1.weight") >= 0);
}

TEST_CASE("checkpoint round trip is exact and validated") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "fume_ckpt_test";
    fs::create_directories(dir);
    std::string path = (dir / "net.bin").string();

    FumeNet<double> net(Variant::Co2Only, 21);
    ckpt::save(path, net.params, variant_name(net.variant), net.seed);
    auto h = ckpt::peek(path);
    CHECK(h.variant == "co2-only");
    CHECK(h.seed == 21);

    FumeNet<double> other(Variant::Co2Only, 99);
    ckpt::load(path, other.params);
    for (std::size_t i = 0; i < net.params.size(); ++i)
        REQUIRE(net.params[static_cast<int>(i)].value.data ==
                other.params[static_cast<int>(i)].value.data);

    // re-saving the loaded state reproduces the file byte for byte
    std::string path2 = (dir / "net2.bin").string();
    ckpt::save(path2, other.params, variant_name(net.variant), net.seed);
    CHECK(slurp(path) == slurp(path2));

    FumeNet<double> wrong(Variant::Fume, 21);
    CHECK_THROWS_AS(ckpt::load(path, wrong.params), DataError);
    CHECK_THROWS_AS(ckpt::peek((dir / "missing.bin").string()), DataError);
}

TEST_CASE("end-to-end gradients pass finite differences at 32x32") {
    Rng rng(31);
    Tensor<double> co2({1, 1, 32, 32}), ch4({1, 1, 32, 32});
    for (auto& v : co2.data) v = rng.uniform();
    for (auto& v : ch4.data) v = rng.uniform();
    FumeNet<double> net(Variant::Fume, 13);
    // Move off the freshly initialized point: with the gamma gates at zero the
    // attention path carries no gradient, and hard relu zeros from the encoder
    // leave the probe loss sitting exactly on downstream kinks.
    for (std::size_t i = 0; i < net.params.size(); ++i) {
        auto& e = net.params[static_cast<int>(i)];
        if (!e.trainable) continue;
        for (auto& v : e.value.data) v += (rng.uniform() - 0.5) * 0.1;
    }
    auto rep = net.grad_check(co2, ch4, 1e-4, 2);
    INFO("worst parameter: " << rep.worst_param << " rel err " << rep.max_rel_err);
    CHECK(rep.pass);
}
