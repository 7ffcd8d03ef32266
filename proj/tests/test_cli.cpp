// Drives the installed CLI binary end to end through std::system.
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kCli = SURVMIL_CLI_PATH;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

int run(const std::string& args, const fs::path& stderr_to = {}) {
    std::string cmd = kCli + " " + args;
    if (!stderr_to.empty())
        cmd += " 2> " + stderr_to.string();
    else
        cmd += " 2> /dev/null";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++n;
    return n;
}

}  // namespace

TEST_CASE("synth writes the documented file set deterministically") {
    TempDir dir("survmil_cli_synth");
    const std::string flags =
        " --n 200 --seed 7 --patches-min 5 --patches-max 8 --feature-dim 8";
    CHECK(run("synth --out " + (dir.path / "d1").string() + flags) == 0);
    std::size_t fbag_count = 0;
    for (const auto& entry : fs::directory_iterator(dir.path / "d1" / "bags"))
        fbag_count += entry.path().extension() == ".fbag";
    CHECK(fbag_count == 600);  // 3 cores x 200 patients
    CHECK(fs::exists(dir.path / "d1" / "manifest.csv"));
    CHECK(fs::exists(dir.path / "d1" / "truth.csv"));

    CHECK(run("synth --out " + (dir.path / "d2").string() + flags) == 0);
    CHECK(read_bytes(dir.path / "d1" / "manifest.csv") ==
          read_bytes(dir.path / "d2" / "manifest.csv"));
    CHECK(read_bytes(dir.path / "d1" / "bags" / "P00042_c1.fbag") ==
          read_bytes(dir.path / "d2" / "bags" / "P00042_c1.fbag"));
}

TEST_CASE("synth with censoring-rate zero reports zero censored") {
    TempDir dir("survmil_cli_synth0");
    const fs::path err = dir.path / "stderr.txt";
    CHECK(run("synth --out " + (dir.path / "d").string() +
                  " --n 25 --patches-min 2 --patches-max 3 --feature-dim 4 "
                  "--censoring-rate 0 --seed 1",
              err) == 0);
    const std::string log = read_bytes(err);
    CHECK(log.find("events=25") != std::string::npos);
    CHECK(log.find("censored_share=0") != std::string::npos);
}

TEST_CASE("train, eval and km round-trip through checkpoints") {
    TempDir dir("survmil_cli_roundtrip");
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --out " + data.string() +
                " --n 30 --cores 2 --patches-min 3 --patches-max 5 --feature-dim 8 --seed 5") ==
            0);
    const std::string manifest = (data / "manifest.csv").string();

    for (const std::string model : {"amil", "maxpool", "deepsurv", "cox", "rsf"}) {
        const fs::path out = dir.path / ("train_" + model);
        REQUIRE(run("train --manifest " + manifest + " --model " + model + " --out " +
                    out.string() + " --epochs 3 --seed 2") == 0);
        CHECK(fs::exists(out / "model.ckpt"));

        const fs::path eval_out = dir.path / ("eval_" + model);
        REQUIRE(run("eval --manifest " + manifest + " --checkpoint " +
                    (out / "model.ckpt").string() + " --out " + eval_out.string()) == 0);
        CHECK(fs::exists(eval_out / "eval.json"));
        CHECK(count_lines(eval_out / "predictions.csv") == 31);  // header + 30 rows
    }

    // Attention export only exists for attention models.
    const fs::path attn = dir.path / "attn";
    CHECK(run("eval --manifest " + manifest + " --checkpoint " +
              (dir.path / "train_amil" / "model.ckpt").string() + " --out " +
              (dir.path / "eval_attn").string() + " --attention-dir " + attn.string()) == 0);
    CHECK(fs::exists(attn / "P00001.csv"));
    CHECK(run("eval --manifest " + manifest + " --checkpoint " +
              (dir.path / "train_cox" / "model.ckpt").string() + " --out " +
              (dir.path / "eval_attn2").string() + " --attention-dir " + attn.string()) == 1);

    // km renders stratification files from eval predictions.
    const fs::path km_out = dir.path / "km";
    REQUIRE(run("km --manifest " + manifest + " --predictions " +
                (dir.path / "eval_cox" / "predictions.csv").string() + " --out " +
                km_out.string()) == 0);
    CHECK(fs::exists(km_out / "km_high.csv"));
    CHECK(fs::exists(km_out / "km_low.csv"));
    CHECK(read_bytes(km_out / "km.svg").find("<svg") != std::string::npos);
}

TEST_CASE("cv for cox never reads feature files") {
    TempDir dir("survmil_cli_tabonly");
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --out " + data.string() +
                " --n 24 --patches-min 2 --patches-max 3 --feature-dim 4 --seed 9") == 0);
    // Truncate every bag to zero bytes: any attempt to read them would fail.
    for (const auto& entry : fs::directory_iterator(data / "bags"))
        std::ofstream(entry.path(), std::ios::trunc).close();

    const std::string manifest = (data / "manifest.csv").string();
    CHECK(run("cv --manifest " + manifest + " --model cox --k 4 --seed 1 --out " +
              (dir.path / "cv_cox").string()) == 0);
    CHECK(fs::exists(dir.path / "cv_cox" / "summary.json"));

    // The bag-based model must fail on the truncated files.
    CHECK(run("cv --manifest " + manifest + " --model maxpool --k 4 --seed 1 --epochs 2 --out " +
              (dir.path / "cv_max").string()) != 0);
}

TEST_CASE("cv emits byte-identical artifacts across reruns") {
    TempDir dir("survmil_cli_cvdet");
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --out " + data.string() +
                " --n 20 --patches-min 2 --patches-max 4 --feature-dim 6 --seed 3") == 0);
    const std::string manifest = (data / "manifest.csv").string();
    const std::string flags = " --model amil --k 4 --seed 11 --epochs 3 --lr 1e-3";
    REQUIRE(run("cv --manifest " + manifest + flags + " --out " + (dir.path / "r1").string()) ==
            0);
    REQUIRE(run("cv --manifest " + manifest + flags + " --out " + (dir.path / "r2").string()) ==
            0);
    for (const char* name : {"summary.json", "cindex.csv", "km_high.csv", "km_low.csv"})
        CHECK(read_bytes(dir.path / "r1" / name) == read_bytes(dir.path / "r2" / name));
}

TEST_CASE("validation failures exit with code 1") {
    TempDir dir("survmil_cli_badflags");
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --out " + data.string() +
                " --n 8 --patches-min 2 --patches-max 2 --feature-dim 4 --seed 2") == 0);
    const std::string manifest = (data / "manifest.csv").string();

    const fs::path err = dir.path / "stderr.txt";
    CHECK(run("train --manifest " + manifest + " --model amil --out " +
                  (dir.path / "t").string() + " --epochs 0",
              err) == 1);
    const std::string msg = read_bytes(err);
    CHECK(msg.rfind("error:", 0) == 0);
    CHECK(msg.find('\n') == msg.size() - 1);  // single line

    CHECK(run("train --manifest " + manifest + " --model nosuch --out " +
              (dir.path / "t2").string()) == 1);
    CHECK(run("cv --manifest " + manifest + " --model cox --k 999 --out " +
              (dir.path / "t3").string()) == 1);
    CHECK(run("eval --manifest " + manifest) == 1);  // missing required flags
    CHECK(run("frobnicate") == 1);                   // unknown subcommand
    CHECK(run("cv --manifest " + manifest + " --model cox --nope 1 --out x") == 1);
}

TEST_CASE("runtime failures exit with code 2") {
    TempDir dir("survmil_cli_runtime");
    const fs::path data = dir.path / "data";
    REQUIRE(run("synth --out " + data.string() +
                " --n 8 --patches-min 2 --patches-max 2 --feature-dim 4 --seed 2") == 0);
    std::ofstream(dir.path / "garbage.ckpt") << "not a checkpoint";
    CHECK(run("eval --manifest " + (data / "manifest.csv").string() + " --checkpoint " +
              (dir.path / "garbage.ckpt").string() + " --out " + (dir.path / "o").string()) ==
          2);
}

TEST_CASE("help output documents the subcommands") {
    TempDir dir("survmil_cli_help");
    const fs::path out = dir.path / "help.txt";
    const int code = std::system((kCli + " --help > " + out.string() + " 2>&1").c_str());
    CHECK(WEXITSTATUS(code) == 0);
    const std::string help = read_bytes(out);
    for (const char* sub : {"synth", "train", "eval", "cv", "km"})
        CHECK(help.find(sub) != std::string::npos);
}
