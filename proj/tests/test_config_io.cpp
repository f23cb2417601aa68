#include <catch2/catch_amalgamated.hpp>

#include "arlab/config.hpp"
#include "arlab/runio.hpp"
#include "arlab/trainer.hpp"

#include <filesystem>
#include <fstream>

using namespace arlab;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("arlab_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string read_first_line(const std::string& path) {
    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    return line;
}

RunConfig tiny_run_config(const std::string& out) {
    RunConfig c;
    c.task = "gaussian-field";
    c.out_dir = out;
    c.steps = 6;
    c.batch = 4;
    c.warmup_steps = 2;
    c.checkpoint_count = 3;
    c.ema_decay = 0.99;
    c.adam.lr = 1e-3;
    c.engine.backbone.embed_dim = 16;
    c.engine.backbone.enc_depth = 1;
    c.engine.backbone.dec_depth = 1;
    c.engine.backbone.num_heads = 2;
    c.engine.backbone.cls_repeat = 2;
    c.engine.backbone.grid_h = 2;
    c.engine.backbone.grid_w = 2;
    c.engine.head.hidden_width = 16;
    c.engine.head.depth = 1;
    c.engine.head.t_embed_dim = 8;
    c.engine.head.d_embed_dim = 8;
    c.finalize();
    return c;
}

}  // namespace

TEST_CASE("config defaults survive a json round trip") {
    RunConfig def;
    def.finalize();
    RunConfig back = config::from_json(config::to_json(def));
    REQUIRE(back.task == def.task);
    REQUIRE(back.steps == def.steps);
    REQUIRE(back.adam.lr == def.adam.lr);
    REQUIRE(back.engine.backbone.embed_dim == def.engine.backbone.embed_dim);
    REQUIRE(back.engine.head.hidden_width == def.engine.head.hidden_width);
    REQUIRE(back.ablate_steps == def.ablate_steps);
}

TEST_CASE("partial config overlays defaults") {
    nlohmann::json j;
    j["task"] = "mixture2d";
    j["train"]["steps"] = 123;
    j["model"]["embed_dim"] = 48;
    RunConfig c = config::from_json(j);
    REQUIRE(c.task == "mixture2d");
    REQUIRE(c.steps == 123);
    REQUIRE(c.engine.backbone.embed_dim == 48);
    REQUIRE(c.engine.backbone.grid_h == 1);  // mixture task forces a 1x1 grid
    REQUIRE(c.engine.head.cond_dim == 48);   // derived from embed_dim
    REQUIRE(c.batch == RunConfig{}.batch);
}

TEST_CASE("config rejects unknown selectors") {
    nlohmann::json j;
    j["head"] = "nonsense";
    REQUIRE_THROWS(config::from_json(j));
    nlohmann::json j2;
    j2["backbone"] = "bidirectional";
    REQUIRE_THROWS(config::from_json(j2));
    nlohmann::json j3;
    j3["task"] = "imagenet";
    REQUIRE_THROWS(config::from_json(j3));
}

TEST_CASE("csv writer pins headers and row arity") {
    fs::path dir = temp_dir("csv");
    std::string path = (dir / "t.csv").string();
    {
        runio::CsvWriter csv(path, {"a", "b"});
        csv.row({"1", "2"});
        REQUIRE_THROWS(csv.row({"1"}));
    }
    REQUIRE(read_first_line(path) == "a,b");
    fs::remove_all(dir);
}

TEST_CASE("run lock is exclusive and releases on destruction") {
    fs::path dir = temp_dir("lock");
    {
        runio::RunLock lock(dir.string());
        REQUIRE_THROWS_WITH(runio::RunLock(dir.string()),
                            Catch::Matchers::ContainsSubstring("locked"));
    }
    runio::RunLock again(dir.string());  // released after scope exit
    fs::remove_all(dir);
}

TEST_CASE("training run emits csv, checkpoints and manifest deterministically") {
    fs::path dir = temp_dir("train");
    RunConfig c = tiny_run_config((dir / "a").string());
    auto out1 = trainer::train(c);
    REQUIRE(out1.checkpoints.size() == 3);
    REQUIRE(fs::exists(out1.final_checkpoint));
    REQUIRE(read_first_line(out1.loss_csv) == "step,lr_scale,fm,consistency,total,grad_norm");
    REQUIRE(fs::exists(dir / "a" / "manifest.json"));

    RunConfig c2 = tiny_run_config((dir / "b").string());
    auto out2 = trainer::train(c2);
    std::ifstream f1(out1.loss_csv), f2(out2.loss_csv);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);  // same seed, same losses, bitwise

    // checkpoints load back
    ParamStore params = checkpoint::load(out1.final_checkpoint);
    REQUIRE(params.size() > 0);
    fs::remove_all(dir);
}

TEST_CASE("cvae training emits its own loss schema") {
    fs::path dir = temp_dir("train_cvae");
    RunConfig c = tiny_run_config((dir / "a").string());
    c.head = "cvae";
    c.engine.cvae.hidden_width = 16;
    c.engine.cvae.latent_dim = 2;
    c.finalize();
    auto out = trainer::train(c);
    REQUIRE(read_first_line(out.loss_csv) == "step,lr_scale,recon,kl,total,grad_norm");
    fs::remove_all(dir);
}

TEST_CASE("cost command emits the full grid with pinned header") {
    fs::path dir = temp_dir("cost");
    RunConfig c;
    c.out_dir = dir.string();
    c.finalize();
    std::string path = trainer::cost_cmd(c);
    REQUIRE(read_first_line(path) ==
            "arch_id,K,O,kv_cache,backbone_flops,head_flops,head_calls,head_share");
    std::ifstream is(path);
    std::string line;
    int rows = 0, mar_100 = 0;
    std::getline(is, line);
    while (std::getline(is, line)) {
        ++rows;
        if (line.find("mar-b-like,64,100") == 0) {
            ++mar_100;
            REQUIRE(line.find(",25600,") != std::string::npos);  // the published call count
        }
    }
    REQUIRE(rows == 2 * 3 * 5 + 2 * 5);  // two masked archs x K x O, causal x cache x O
    REQUIRE(mar_100 == 1);
    fs::remove_all(dir);
}

TEST_CASE("gradcheck command passes clean and fails when corrupted") {
    auto rows = trainer::gradcheck_cmd(false);
    REQUIRE(rows.size() >= 16);  // one row per primitive plus the losses
    for (auto& r : rows) {
        INFO(r.name);
        REQUIRE(r.pass);
    }
    auto corrupted = trainer::gradcheck_cmd(true);
    bool any_fail = false;
    for (auto& r : corrupted) any_fail = any_fail || !r.pass;
    REQUIRE(any_fail);
}

TEST_CASE("sample command writes grid dump and manifest") {
    fs::path dir = temp_dir("sample");
    RunConfig c = tiny_run_config((dir / "t").string());
    c.steps = 2;
    c.checkpoint_count = 1;
    auto out = trainer::train(c);

    RunConfig sc = c;
    sc.out_dir = (dir / "s").string();
    sc.num_samples = 3;
    sc.sample_steps = 2;
    std::string csv = trainer::sample_cmd(sc, out.final_checkpoint);
    REQUIRE(read_first_line(csv) == "sample,position,c0,c1");
    std::ifstream is(csv);
    std::string line;
    int rows = -1;
    while (std::getline(is, line)) ++rows;
    REQUIRE(rows == 3 * 4);  // samples x positions
    REQUIRE(fs::exists(fs::path(sc.out_dir) / "sample_manifest.json"));
    fs::remove_all(dir);
}

TEST_CASE("oracle command requires a checkpoint that exists") {
    fs::path dir = temp_dir("oracle");
    RunConfig c = tiny_run_config((dir / "o").string());
    REQUIRE_THROWS(trainer::oracle_cmd(c, (dir / "missing.bin").string()));
    fs::remove_all(dir);
}
