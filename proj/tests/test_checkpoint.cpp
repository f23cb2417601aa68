#include <catch2/catch_amalgamated.hpp>

#include "arlab/checkpoint.hpp"
#include "arlab/rng.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

using namespace arlab;

TEST_CASE("checkpoint round trip preserves order, flags and bits") {
    RngStream rng(21, "ckpt");
    ParamStore params;
    params.add("enc.w", Tensor::randn({4, 3}, rng));
    params.add("enc.b", Tensor::randn({3}, rng), /*wd_exempt=*/true);
    params.add("head.out", Tensor::randn({2, 2, 2}, rng), /*wd_exempt=*/true);

    auto path = (std::filesystem::temp_directory_path() / "arlab_ckpt_test.bin").string();
    checkpoint::save(params, path);
    ParamStore back = checkpoint::load(path);

    REQUIRE(back.names() == params.names());
    for (auto& name : params.names()) {
        const Param& a = params.param(name);
        const Param& b = back.param(name);
        REQUIRE(a.wd_exempt == b.wd_exempt);
        REQUIRE(a.value.shape() == b.value.shape());
        REQUIRE(std::memcmp(a.value.data(), b.value.data(), size_t(a.value.numel()) * sizeof(double)) == 0);
    }
    std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects wrong magic and truncation") {
    auto dir = std::filesystem::temp_directory_path();
    auto bad = (dir / "arlab_ckpt_bad.bin").string();
    {
        std::ofstream os(bad, std::ios::binary);
        os << "NOPE then some trailing bytes";
    }
    REQUIRE_THROWS_WITH(checkpoint::load(bad), Catch::Matchers::ContainsSubstring("magic"));

    ParamStore params;
    params.add("p", Tensor::from({1.0, 2.0, 3.0}));
    auto full = (dir / "arlab_ckpt_full.bin").string();
    checkpoint::save(params, full);
    auto truncated = (dir / "arlab_ckpt_trunc.bin").string();
    {
        std::ifstream is(full, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        std::ofstream os(truncated, std::ios::binary);
        os.write(bytes.data(), std::streamsize(bytes.size() - 9));
    }
    REQUIRE_THROWS_WITH(checkpoint::load(truncated), Catch::Matchers::ContainsSubstring("truncated"));
    std::remove(bad.c_str());
    std::remove(full.c_str());
    std::remove(truncated.c_str());
}
