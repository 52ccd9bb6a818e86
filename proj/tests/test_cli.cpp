// End-to-end checks that spawn the real binary (path injected by CMake as
// KVCAR_BIN_PATH).

#include <doctest.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <kvcar/checkpoint.hpp>

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int exit_code;
    std::string output; // stdout + stderr
};

RunResult run(const std::string& args) {
    const std::string cmd = std::string(KVCAR_BIN_PATH) + " " + args + " 2>&1";
    std::array<char, 4096> buffer{};
    std::string output;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buffer.data(), buffer.size(), pipe)) output += buffer.data();
    const int status = pclose(pipe);
    return {WEXITSTATUS(status), output};
}

fs::path work_dir() {
    static fs::path dir = [] {
        fs::path d = fs::temp_directory_path() / ("kvcar_cli_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string corpus_path() {
    static std::string path = [] {
        const fs::path p = work_dir() / "corpus.bin";
        std::ofstream out(p, std::ios::binary);
        for (int i = 0; i < 16384; ++i) out.put(static_cast<char>('a' + (i % 26)));
        return p.string();
    }();
    return path;
}

std::string base_flags() {
    return " --n-layers 2 --n-heads 2 --d-model 16 --d-ff 32 --max-seq 17"
           " --lr 0.5 --batch 8 --epochs 1 --window 16 --seed 7";
}

std::string file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("pretrain is deterministic: identical checkpoints byte for byte") {
    const std::string a = (work_dir() / "det_a.kvcar").string();
    const std::string b = (work_dir() / "det_b.kvcar").string();
    auto ra = run("pretrain --corpus " + corpus_path() + " --out " + a + base_flags());
    CHECK_MESSAGE(ra.exit_code == 0, ra.output);
    auto rb = run("pretrain --corpus " + corpus_path() + " --out " + b + base_flags());
    CHECK(rb.exit_code == 0);
    CHECK(file_bytes(a) == file_bytes(b));
    CHECK(ra.output.find("perplexity") != std::string::npos);
}

TEST_CASE("a too-small corpus is rejected with a nonzero exit") {
    const fs::path tiny = work_dir() / "tiny.bin";
    {
        std::ofstream out(tiny, std::ios::binary);
        out << "tiny";
    }
    auto r = run("pretrain --corpus " + tiny.string() + " --out " +
                 (work_dir() / "x.kvcar").string() + base_flags());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("corpus") != std::string::npos);
}

TEST_CASE("unknown config keys are named in the failure") {
    const fs::path cfg = work_dir() / "bad.json";
    {
        std::ofstream out(cfg);
        out << R"({"lr": 0.5, "learning_rate_typo": 1.0})";
    }
    auto r = run("pretrain --corpus " + corpus_path() + " --out " +
                 (work_dir() / "y.kvcar").string() + base_flags() + " --config " + cfg.string());
    CHECK(r.exit_code != 0);
    CHECK(r.output.find("learning_rate_typo") != std::string::npos);
}

TEST_CASE("train-ae accepts its required keys from the config file") {
    const std::string base = (work_dir() / "cfg_base.kvcar").string();
    auto r0 = run("pretrain --corpus " + corpus_path() + " --out " + base + base_flags());
    REQUIRE_MESSAGE(r0.exit_code == 0, r0.output);

    const fs::path cfg = work_dir() / "ae.json";
    {
        std::ofstream out(cfg);
        out << R"({"layers": "1", "latent-dim": 8, "epochs": 1, "lr": 0.2, "window": 16})";
    }
    auto r1 = run("train-ae --ckpt " + base + " --corpus " + corpus_path() + " --out " +
                  (work_dir() / "cfg_s1.kvcar").string() + " --seed 7 --config " + cfg.string());
    CHECK_MESSAGE(r1.exit_code == 0, r1.output);

    // Missing keys entirely is still an error that names the key.
    auto r2 = run("train-ae --ckpt " + base + " --corpus " + corpus_path() + " --out " +
                  (work_dir() / "cfg_s1b.kvcar").string() + " --seed 7");
    CHECK(r2.exit_code != 0);
    CHECK(r2.output.find("layers") != std::string::npos);
}

TEST_CASE("config values apply where flags are absent and flags win otherwise") {
    const fs::path cfg = work_dir() / "merge.json";
    {
        // epochs from the file; lr overridden by the flag below.
        std::ofstream out(cfg);
        out << R"({"epochs": 1, "lr": 99.0})";
    }
    const std::string out_path = (work_dir() / "merge.kvcar").string();
    auto r = run("pretrain --corpus " + corpus_path() + " --out " + out_path +
                 " --n-layers 1 --n-heads 2 --d-model 16 --d-ff 32 --max-seq 17"
                 " --lr 0.5 --batch 8 --window 16 --seed 7 --config " +
                 cfg.string());
    CHECK_MESSAGE(r.exit_code == 0, r.output); // lr 99 would diverge; the flag won
}

TEST_CASE("the full pipeline runs and reports savings") {
    const std::string base = (work_dir() / "pipe_base.kvcar").string();
    auto r0 = run("pretrain --corpus " + corpus_path() + " --out " + base + base_flags());
    REQUIRE_MESSAGE(r0.exit_code == 0, r0.output);

    const std::string s1 = (work_dir() / "pipe_s1.kvcar").string();
    auto r1 = run("train-ae --ckpt " + base + " --corpus " + corpus_path() + " --out " + s1 +
                  " --layers 1 --latent-dim 8 --lr 0.2 --epochs 2 --window 16 --batch 8 --seed 7");
    CHECK_MESSAGE(r1.exit_code == 0, r1.output);
    CHECK(r1.output.find("autoencoder-only 25%") != std::string::npos);

    const std::string s2 = (work_dir() / "pipe_s2.kvcar").string();
    auto r2 = run("finetune-ae --ckpt " + s1 + " --corpus " + corpus_path() + " --out " + s2 +
                  " --lr 0.1 --epochs 1 --window 16 --batch 8 --seed 7");
    CHECK_MESSAGE(r2.exit_code == 0, r2.output);

    auto r3 = run("eval --ckpt " + s2 + " --corpus " + corpus_path() +
                  " --scheme ae --window 16 --seed 7");
    CHECK_MESSAGE(r3.exit_code == 0, r3.output);
    CHECK(r3.output.find("perplexity") != std::string::npos);
    CHECK(r3.output.find("savings 25%") != std::string::npos);

    auto r4 = run("eval --ckpt " + base + " --corpus " + corpus_path() +
                  " --scheme ae --window 16 --seed 7");
    CHECK(r4.exit_code != 0); // no autoencoders stored: scheme mismatch
    CHECK(r4.output.find("mismatch") != std::string::npos);

    const std::string stats = (work_dir() / "stats.json").string();
    auto r5 = run("analyze-heads --ckpt " + base + " --corpus " + corpus_path() + " --out " + stats +
                  " --window 16 --batch 8 --seed 7");
    CHECK_MESSAGE(r5.exit_code == 0, r5.output);

    const std::string reused = (work_dir() / "pipe_reuse.kvcar").string();
    auto r6 = run("finetune-reuse --ckpt " + base + " --corpus " + corpus_path() + " --out " +
                  reused + " --stats " + stats +
                  " --threshold-percentile 25 --lr 0.2 --epochs 1 --window 16 --batch 8 --seed 7");
    CHECK_MESSAGE(r6.exit_code == 0, r6.output);
    CHECK(r6.output.find("aliased slots") != std::string::npos);

    // The stored plan is honored by eval.
    auto r7 = run("eval --ckpt " + reused + " --corpus " + corpus_path() +
                  " --scheme identity+reuse --window 16 --seed 7");
    CHECK_MESSAGE(r7.exit_code == 0, r7.output);
}

TEST_CASE("a one-layer model reaches perplexity below 2 on the cyclic corpus") {
    const std::string out = (work_dir() / "one_layer.kvcar").string();
    auto r = run("pretrain --corpus " + corpus_path() + " --out " + out +
                 " --n-layers 1 --n-heads 2 --d-model 32 --d-ff 64 --max-seq 17"
                 " --lr 0.5 --batch 8 --epochs 3 --window 16 --seed 11");
    REQUIRE_MESSAGE(r.exit_code == 0, r.output);
    const auto pos = r.output.find("held-out perplexity ");
    REQUIRE(pos != std::string::npos);
    const double ppl = std::stod(r.output.substr(pos + 20));
    CHECK(ppl < 2.0);
}

TEST_CASE("KVCAR_LOG=info enables progress lines on stderr") {
    const std::string out = (work_dir() / "logged.kvcar").string();
    const std::string cmd = std::string("KVCAR_LOG=info ") + KVCAR_BIN_PATH + " pretrain --corpus " +
                            corpus_path() + " --out " + out + base_flags() + " 2>&1";
    std::array<char, 4096> buffer{};
    std::string output;
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    while (fgets(buffer.data(), buffer.size(), pipe)) output += buffer.data();
    pclose(pipe);
    CHECK(output.find("[kvcar:info]") != std::string::npos);
}

TEST_CASE("plan emits the reference header and a dominance-ordered CSV") {
    const std::string csv = (work_dir() / "frontier.csv").string();
    auto r = run("plan --n-layers 24 --n-heads 16 --d-model 1024 --bytes-per-element 2"
                 " --budget-bytes 17179869184 --batches 8,1,4 --schemes identity:1.0,half:0.5"
                 " --out " + csv);
    CHECK_MESSAGE(r.exit_code == 0, r.output);
    CHECK(r.output.find("1610612736 bytes") != std::string::npos);

    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "scheme,batch,max_seq");
    int64_t identity_b1 = 0, half_b1 = 0;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string scheme, batch, seq;
        std::getline(ss, scheme, ',');
        std::getline(ss, batch, ',');
        std::getline(ss, seq, ',');
        if (batch == "1") {
            if (scheme == "identity") identity_b1 = std::stoll(seq);
            if (scheme == "half") half_b1 = std::stoll(seq);
        }
    }
    CHECK(half_b1 >= identity_b1);
    CHECK(identity_b1 > 0);
}

TEST_CASE("report-savings covers the flag-driven path") {
    auto r = run("report-savings --n-layers 22 --n-heads 4 --compressed-layers "
                 "0,1,2,3,4,5,6,7,8,9,10 --dd-ratio 0.5");
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("autoencoder-only 25%") != std::string::npos);
}

TEST_CASE("bad invocations exit nonzero") {
    CHECK(run("").exit_code != 0);
    CHECK(run("pretrain").exit_code != 0); // missing required flags
    CHECK(run("eval --ckpt /nonexistent.kvcar --corpus " + corpus_path()).exit_code != 0);
    CHECK(run("plan --n-layers 2 --n-heads 2 --d-model 8 --budget-bytes 10"
              " --bytes-per-element 3").exit_code != 0);
}
