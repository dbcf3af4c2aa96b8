#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <doctest.h>
#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kTmp = PROTOS_TEST_TMP;

/// Runs the CLI with stdout/stderr sent to files in the scratch area; returns the exit status.
int run(const std::string& args, const std::string& tag = "last") {
    fs::create_directories(kTmp);
    const std::string cmd = std::string(PROTOS_CLI) + " " + args + " >" + (kTmp / (tag + ".out")).string() + " 2>" +
                            (kTmp / (tag + ".err")).string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

json load(const fs::path& p) { return json::parse(slurp(p)); }

void write(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream(p) << text;
}

/// Small dataset and a short training run shared by the tests below.
struct Fixture {
    fs::path data = kTmp / "data";
    fs::path run_dir = kTmp / "run";
    fs::path config = kTmp / "train.json";
    Fixture() {
        fs::remove_all(kTmp);
        write(kTmp / "gen.json", R"({"num_classes": 4, "train_per_class": 4, "test_per_class": 3, "seed": 5})");
        REQUIRE(run("gen --config " + (kTmp / "gen.json").string() + " --out " + data.string()) == 0);
        write(config, R"({"num_prototypes": 8, "proto_dim": 16, "epochs": 3, "warmup_epochs": 1,
                          "sparsity_warmup_epochs": 0, "batch_size": 8})");
        REQUIRE(run("train --quiet --data " + data.string() + " --config " + config.string() + " --out " +
                    run_dir.string()) == 0);
    }
    fs::path checkpoint() const { return run_dir / "checkpoint"; }
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

}  // namespace

TEST_CASE("gen: byte-identical output for the same seed, refusal without --force") {
    const Fixture& f = fixture();
    const fs::path again = kTmp / "data_again";
    REQUIRE(run("gen --config " + (kTmp / "gen.json").string() + " --out " + again.string()) == 0);
    for (const auto& entry : fs::recursive_directory_iterator(f.data)) {
        if (!entry.is_regular_file() || entry.path().filename() == "run_manifest.json") continue;
        const fs::path rel = fs::relative(entry.path(), f.data);
        CHECK_MESSAGE(slurp(entry.path()) == slurp(again / rel), rel.string());
    }
    CHECK(run("gen --config " + (kTmp / "gen.json").string() + " --out " + again.string()) == 3);
    CHECK(run("gen --force --config " + (kTmp / "gen.json").string() + " --out " + again.string()) == 0);

    const json m = load(f.data / "run_manifest.json");
    CHECK(m.at("kind") == "run_manifest");
    CHECK(m.at("seeds").at("seed") == 5);
}

TEST_CASE("gen: invalid type counts are rejected before writing") {
    write(kTmp / "bad_gen.json", R"({"num_classes": 500, "type_counts": [1, 1, 1, 1, 1]})");
    const fs::path out = kTmp / "bad_data";
    CHECK(run("gen --config " + (kTmp / "bad_gen.json").string() + " --out " + out.string()) == 2);
    CHECK(!fs::exists(out / "manifest.jsonl"));
    CHECK(run("gen --bogus") == 2);
}

TEST_CASE("train: manifest records the effective configuration") {
    const Fixture& f = fixture();
    const json m = load(f.run_dir / "run_manifest.json");
    CHECK(m.at("config").at("num_prototypes") == 8);
    CHECK(m.at("config").at("proto_dim") == 16);
    CHECK(m.at("config").at("epochs") == 3);
    CHECK(m.at("outputs").at("content_hash").get<std::string>().size() == 64);
    CHECK(fs::exists(f.run_dir / "train_log.jsonl"));
    CHECK(fs::exists(f.checkpoint() / "manifest.json"));

    const fs::path abl = kTmp / "run_ablation";
    REQUIRE(run("train --quiet --ablation no_prototypical_head --epochs 2 --data " + f.data.string() + " --config " +
                f.config.string() + " --out " + abl.string()) == 0);
    const json a = load(abl / "run_manifest.json");
    CHECK(a.at("config").at("ablations") == json::array({"no_prototypical_head"}));
    CHECK(a.at("config").at("epochs") == 2);
}

TEST_CASE("train: missing dataset manifest and refusal") {
    const Fixture& f = fixture();
    const fs::path empty = kTmp / "empty_data";
    fs::create_directories(empty);
    CHECK(run("train --quiet --data " + empty.string() + " --out " + (kTmp / "never").string()) == 4);
    CHECK(run("train --quiet --data " + f.data.string() + " --config " + f.config.string() + " --out " +
              f.run_dir.string()) == 3);
}

TEST_CASE("train: resuming from the last epoch reproduces the uninterrupted hash") {
    const Fixture& f = fixture();
    const std::string full_hash = load(f.run_dir / "run_manifest.json").at("outputs").at("content_hash");
    const fs::path resumed = kTmp / "run_resumed";
    const std::string args = "train --quiet --data " + f.data.string() + " --config " + f.config.string() + " --out " +
                             resumed.string();
    REQUIRE(run(args + " --stop-after 2") == 0);
    CHECK(load(resumed / "last" / "manifest.json").at("metadata").at("epoch") == 2);
    CHECK(!fs::exists(resumed / "checkpoint"));
    REQUIRE(run(args + " --resume") == 0);
    CHECK(load(resumed / "run_manifest.json").at("outputs").at("content_hash") == full_hash);
    CHECK(slurp(resumed / "train_log.jsonl") == slurp(f.run_dir / "train_log.jsonl"));
    CHECK(load(resumed / "run_manifest.json").at("inputs").at("resumed") == true);
}

TEST_CASE("eval: compactness-only report and determinism") {
    const Fixture& f = fixture();
    const fs::path a = kTmp / "eval_a", b = kTmp / "eval_b";
    const std::string base = "eval --checkpoint " + f.checkpoint().string() + " --data " + f.data.string();
    REQUIRE(run(base + " --metrics compactness --out " + a.string()) == 0);
    const json r = load(a / "report.json");
    CHECK(r.contains("accuracy"));
    CHECK(r.contains("global_size"));
    CHECK(r.contains("local_size"));
    CHECK(!r.contains("funnybirds"));
    CHECK(!r.contains("stability"));
    CHECK(run(base + " --metrics nonsense --out " + (kTmp / "eval_bad").string()) == 2);

    REQUIRE(run(base + " --metrics all --limit 6 --out " + a.string() + " --force") == 0);
    REQUIRE(run(base + " --metrics all --limit 6 --out " + b.string()) == 0);
    json ra = load(a / "report.json"), rb = load(b / "report.json");
    ra.erase("wall_clock_seconds");
    rb.erase("wall_clock_seconds");
    CHECK(ra == rb);
    CHECK(ra.contains("radar"));
    CHECK(ra.at("num_scenes") == 6);

    // Schema check when a validator is available.
    if (std::system("python3 -c 'import jsonschema' >/dev/null 2>&1") == 0) {
        const std::string cmd = "python3 -c 'import json,sys,jsonschema; jsonschema.validate(json.load(open(sys.argv[1])), "
                                "json.load(open(sys.argv[2])))' " +
                                (a / "report.json").string() + " " + PROTOS_SCHEMA;
        CHECK(std::system(cmd.c_str()) == 0);
    }
}

TEST_CASE("explain: sidecar importances and panel count") {
    const Fixture& f = fixture();
    const fs::path out = kTmp / "explain";
    const fs::path image = f.data / "images" / "test_00000.png";
    REQUIRE(run("explain --topk 2 --checkpoint " + f.checkpoint().string() + " --image " + image.string() + " --out " +
                out.string()) == 0);
    const json e = load(out / "explanation.json");
    CHECK(e.at("kind") == "explanation");
    const auto n = e.at("items").size();
    CHECK(n <= 2u);
    double sum = 0.0;
    for (const auto& item : e.at("items")) sum += item.at("importance").get<double>();
    CHECK(sum == doctest::Approx(e.at("listed_importance").get<double>()));
    CHECK(sum == doctest::Approx(e.at("coverage").get<double>() * e.at("class_score").get<double>()).epsilon(1e-4));
    const std::string svg = slurp(out / "score_sheet.svg");
    int panels = 0;
    for (auto p = svg.find("<image "); p != std::string::npos; p = svg.find("<image ", p + 1)) ++panels;
    CHECK(panels == static_cast<int>(n) + 1);
    CHECK(run("explain --topk 0 --checkpoint " + f.checkpoint().string() + " --image " + image.string() + " --out " +
              (kTmp / "explain0").string()) == 2);
}

TEST_CASE("report: missing metrics exit 4, full report renders deterministically") {
    const Fixture& f = fixture();
    const fs::path partial = kTmp / "eval_partial";
    REQUIRE(run("eval --metrics compactness --checkpoint " + f.checkpoint().string() + " --data " + f.data.string() +
                " --out " + partial.string()) == 0);
    CHECK(run("report --report " + (partial / "report.json").string() + " --out " + (kTmp / "rep_bad").string()) == 4);
    CHECK(!fs::exists(kTmp / "rep_bad" / "radar.svg"));

    const fs::path full = kTmp / "eval_a" / "report.json";
    REQUIRE(fs::exists(full));
    const fs::path r1 = kTmp / "rep1", r2 = kTmp / "rep2";
    REQUIRE(run("report --report " + full.string() + " --checkpoint " + f.checkpoint().string() + " --out " +
                r1.string()) == 0);
    REQUIRE(run("report --report " + full.string() + " --checkpoint " + f.checkpoint().string() + " --out " +
                r2.string()) == 0);
    for (const char* name : {"radar.svg", "tables.md", "correlation.svg"}) {
        CHECK(fs::exists(r1 / name));
        CHECK(slurp(r1 / name) == slurp(r2 / name));
    }
}
