#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "psrlab/runio.hpp"

using namespace psrlab;
namespace fs = std::filesystem;

namespace {

const std::string kBin = PSRLAB_BIN;

int run(const std::string& args) {
    const std::string cmd = kBin + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string operator/(const std::string& sub) const { return (path / sub).string(); }
};

}  // namespace

TEST_CASE("cli: full small pipeline with schema-valid artifacts") {
    TempDir tmp("psrlab_cli_pipeline");
    const std::string data = tmp / "data";
    const std::string cleaned = tmp / "cleaned";
    const std::string sft = tmp / "sft";
    const std::string rl = tmp / "rl";
    const std::string bench = tmp / "bench";
    const std::string report = tmp / "report.json";

    REQUIRE(run("gen-data --out " + data + " --num-samples 8 --seed 3") == 0);
    CHECK(fs::exists(data + "/manifest.jsonl"));
    CHECK(fs::exists(data + "/effective-config.txt"));

    REQUIRE(run("clean --data " + data + " --out " + cleaned + " --tau-sim 0.0 --tau-sem 0.0") == 0);
    const auto clean_report = nlohmann::json::parse(read_text_file(cleaned + "/clean_report.json"));
    CHECK(clean_report.at("kept").get<int>() == 8);

    REQUIRE(run("train-sft --data " + data + " --out " + sft +
                " --steps 2 --batch 1 --seed 4 --ref-mix 1,0,0 --d-model 32 --heads 2 --layers 1 --patch 8 --time-dim 8") == 0);
    CHECK(fs::exists(sft + "/checkpoint_final.ckpt"));
    CHECK(fs::exists(sft + "/model_config.json"));

    REQUIRE(run("train-grpo --data " + data + " --init " + sft + "/checkpoint_final.ckpt --out " + rl +
                " --iterations 1 --group-size 2 --grid-steps 4 --epsilon 0.01 --noise-level 0.5 --seed 5") == 0);
    CHECK(fs::exists(rl + "/checkpoint_final.ckpt"));
    CHECK(read_lines(rl + "/metrics.jsonl").size() == 1);

    REQUIRE(run("eval --checkpoint " + sft + "/checkpoint_final.ckpt --bench-dir " + bench +
                " --cases-per-subset 2 --bench-seed 6 --out " + report + " --grid-steps 4 --epsilon 0.01 --seed 7") ==
            0);
    const auto rj = nlohmann::json::parse(read_text_file(report));
    CHECK(rj.contains("overall"));
    CHECK(rj.at("subsets").size() == 7);
    CHECK(rj.at("cases").size() == 14);
    CHECK(rj.at("header").at("sampler").get<std::string>() == "ode");
    CHECK(rj.at("overall").at("subject_consistency").is_number());

    REQUIRE(run("sample --checkpoint " + sft + "/checkpoint_final.ckpt --bench-dir " + bench +
                " --subset attribute --index 0 --out " + (tmp / "sample") + " --grid-steps 4 --epsilon 0.01") == 0);
    CHECK(fs::exists(tmp / "sample/output.png"));
    CHECK(fs::exists(tmp / "sample/output.psr"));
    CHECK(fs::exists(tmp / "sample/rewards.json"));

    REQUIRE(run("inspect --checkpoint " + sft + "/checkpoint_final.ckpt --data " + data + " --bench-dir " + bench) ==
            0);
}

TEST_CASE("cli: train-grpo with zero iterations copies the checkpoint byte-identically") {
    TempDir tmp("psrlab_cli_zeroiter");
    const std::string data = tmp / "data";
    const std::string sft = tmp / "sft";
    const std::string rl = tmp / "rl";
    REQUIRE(run("gen-data --out " + data + " --num-samples 4 --seed 11") == 0);
    REQUIRE(run("train-sft --data " + data + " --out " + sft +
                " --steps 1 --batch 1 --seed 2 --ref-mix 1,0,0 --d-model 32 --heads 2 --layers 1 --patch 8 --time-dim 8") == 0);
    REQUIRE(run("train-grpo --data " + data + " --init " + sft + "/checkpoint_final.ckpt --out " + rl +
                " --iterations 0 --seed 5") == 0);
    CHECK(read_text_file(sft + "/checkpoint_final.ckpt") == read_text_file(rl + "/checkpoint_final.ckpt"));
}

TEST_CASE("cli: deterministic artifacts under a fixed seed") {
    TempDir tmp("psrlab_cli_determinism");
    const std::string a = tmp / "a";
    const std::string b = tmp / "b";
    REQUIRE(run("gen-data --out " + a + " --num-samples 5 --seed 17") == 0);
    REQUIRE(run("gen-data --out " + b + " --num-samples 5 --seed 17") == 0);
    CHECK(read_text_file(a + "/manifest.jsonl") == read_text_file(b + "/manifest.jsonl"));
    CHECK(read_text_file(a + "/rasters/000003_target.psr") == read_text_file(b + "/rasters/000003_target.psr"));
}

TEST_CASE("cli: exit codes for config, data and overwrite errors") {
    TempDir tmp("psrlab_cli_errors");
    // Unknown encoding variant -> config error (2).
    CHECK(run("train-sft --data " + (tmp / "none") + " --out " + (tmp / "o1") + " --encoding bogus --steps 1") == 2);
    // Missing dataset -> data error (3).
    CHECK(run("train-sft --data " + (tmp / "none") + " --out " + (tmp / "o2") +
              " --steps 1 --ref-mix 1,0,0 --d-model 32 --heads 2 --layers 1 --patch 8 --time-dim 8") == 3);
    // Refusing to overwrite an existing non-empty directory (3).
    fs::create_directories(tmp / "busy");
    std::ofstream(tmp / "busy/file.txt") << "x";
    CHECK(run("gen-data --out " + (tmp / "busy") + " --num-samples 2 --seed 1") == 3);
    // Bad subject mix -> config error (2).
    CHECK(run("gen-data --out " + (tmp / "o3") + " --num-samples 2 --subjects 7:1.0") == 2);
    // Unknown flag -> CLI parse error -> config error (2).
    CHECK(run("gen-data --out " + (tmp / "o4") + " --definitely-not-a-flag 1") == 2);
}

TEST_CASE("cli: config file keys are honored and unknown keys rejected") {
    TempDir tmp("psrlab_cli_config");
    {
        std::ofstream cfg(tmp / "run.cfg");
        cfg << "num-samples=3\nseed=21\n";
    }
    REQUIRE(run("gen-data --out " + (tmp / "d") + " --config " + (tmp / "run.cfg")) == 0);
    CHECK(read_lines((tmp / "d") + "/manifest.jsonl").size() == 3);
    {
        std::ofstream cfg(tmp / "bad.cfg");
        cfg << "num-samples=3\nnot-a-real-key=1\n";
    }
    CHECK(run("gen-data --out " + (tmp / "d2") + " --config " + (tmp / "bad.cfg")) == 2);
}
