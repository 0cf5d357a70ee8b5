#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "conserve/cli.hpp"
#include "conserve/dynamics.hpp"

using namespace conserve;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CaptureStreams {
    std::ostringstream out, err;
    std::streambuf* old_out;
    std::streambuf* old_err;
    CaptureStreams()
        : old_out(std::cout.rdbuf(out.rdbuf())), old_err(std::cerr.rdbuf(err.rdbuf())) {}
    ~CaptureStreams() {
        std::cout.rdbuf(old_out);
        std::cerr.rdbuf(old_err);
    }
};

int run(const std::vector<std::string>& args, std::string* out = nullptr,
        std::string* err = nullptr) {
    CaptureStreams cap;
    int code = run_cli(args);
    if (out) *out = cap.out.str();
    if (err) *err = cap.err.str();
    return code;
}

fs::path fresh_dir(const char* stem) {
    fs::path dir = fs::temp_directory_path() / stem;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ostringstream ss;
    ss << std::ifstream(p).rdbuf();
    return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream f(p);
    f << text;
}

// CSV data rows: skips '#' comments and the header line.
std::vector<std::string> data_rows(const fs::path& p) {
    std::ifstream f(p);
    std::vector<std::string> rows;
    std::string line;
    bool header_seen = false;
    while (std::getline(f, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            header_seen = true;
            continue;
        }
        rows.push_back(line);
    }
    return rows;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

} // namespace

TEST_CASE("usage and error exit codes") {
    std::string err;
    CHECK(run({}) == 2);                                 // no command
    CHECK(run({"frobnicate"}) == 2);                     // unknown command
    CHECK(run({"--help"}) == 0);
    CHECK(run({"gen-data", "--bogus-flag"}) == 2);
    CHECK(run({"gen-data", "--system", "hovercraft"}, nullptr, &err) == 2);
    CHECK(err.find("hovercraft") != std::string::npos);
    CHECK(run({"bound", "--sweep", "volume"}) == 2);     // unknown sweep variable
    CHECK(run({"gen-data", "--config", "/nonexistent/config.json"}) == 2);
}

TEST_CASE("strict config rejects unknown keys by section") {
    fs::path dir = fresh_dir("conserve_cli_cfg");
    fs::path cfg = dir / "bad.json";
    write_file(cfg, R"({"screen": {"n_null": 5, "nulls": 7}})");
    std::string err;
    CHECK(run({"gen-data", "--config", cfg.string(), "--out-dir", dir.string()}, nullptr,
              &err) == 2);
    CHECK(err.find("nulls") != std::string::npos);
    CHECK(err.find("screen") != std::string::npos);

    write_file(cfg, R"({"system": {"kind": "ideal-spring", "dampening": 0.1}})");
    CHECK(run({"gen-data", "--config", cfg.string(), "--out-dir", dir.string()}, nullptr,
              &err) == 2);
    CHECK(err.find("dampening") != std::string::npos);

    write_file(cfg, "{ not json");
    CHECK(run({"gen-data", "--config", cfg.string()}) == 2);
    fs::remove_all(dir);
}

TEST_CASE("gen-data writes deterministic files and an accurate manifest") {
    fs::path dir = fresh_dir("conserve_cli_gen");
    fs::path cfg = dir / "cfg.json";
    write_file(cfg, R"({
        "system": {"kind": "ideal-spring"},
        "data": {"n_train": 5, "n_test": 3, "states_per_traj": 12, "seed": 11}
    })");
    std::string out;
    REQUIRE(run({"gen-data", "--config", cfg.string(), "--out-dir", dir.string()}, &out) == 0);
    CHECK(out.find("5 train") != std::string::npos);

    REQUIRE(fs::exists(dir / "train.csv"));
    REQUIRE(fs::exists(dir / "test.csv"));
    REQUIRE(fs::exists(dir / "manifest.json"));

    json manifest;
    std::ifstream(dir / "manifest.json") >> manifest;
    CHECK(manifest.at("n_train") == 5);
    CHECK(manifest.at("n_test") == 3);
    CHECK(manifest.at("states_per_traj") == 12);
    CHECK(manifest.at("seed") == 11);
    CHECK(manifest.contains("config"));     // resolved config echoed
    CHECK(manifest.contains("config_hash"));
    double h_min = manifest.at("energy").at("min").get<double>();
    double h_max = manifest.at("energy").at("max").get<double>();
    CHECK(h_min >= 0.0);
    CHECK(h_max <= 0.5 * 1.05); // spring band cap plus RK4 slack

    auto loaded = load_trajectories_csv(dir / "train.csv");
    REQUIRE(loaded.size() == 5);
    CHECK(loaded.front().states.size() == 12);

    SUBCASE("rerun is byte-identical") {
        std::string train1 = slurp(dir / "train.csv");
        std::string test1 = slurp(dir / "test.csv");
        std::string man1 = slurp(dir / "manifest.json");
        REQUIRE(run({"gen-data", "--config", cfg.string(), "--out-dir", dir.string()}) == 0);
        CHECK(slurp(dir / "train.csv") == train1);
        CHECK(slurp(dir / "test.csv") == test1);
        CHECK(slurp(dir / "manifest.json") == man1);
    }
    SUBCASE("command-line overrides beat the config file") {
        REQUIRE(run({"gen-data", "--config", cfg.string(), "--out-dir", dir.string(),
                     "--seed", "12"}) == 0);
        json m2;
        std::ifstream(dir / "manifest.json") >> m2;
        CHECK(m2.at("seed") == 12);
    }
    fs::remove_all(dir);
}

TEST_CASE("verify checks energy drift on ideal data and form on dissipative") {
    fs::path dir = fresh_dir("conserve_cli_verify");
    fs::path cfg = dir / "cfg.json";
    write_file(cfg, R"({
        "system": {"kind": "ideal-pendulum"},
        "data": {"dt": 0.02, "n_train": 4, "n_test": 2, "states_per_traj": 15, "seed": 2}
    })");
    REQUIRE(run({"gen-data", "--config", cfg.string(), "--out-dir", dir.string()}) == 0);

    std::string out;
    CHECK(run({"verify", "--config", cfg.string(), "--out-dir", dir.string(),
               "--data", (dir / "train.csv").string()}, &out) == 0);
    CHECK(out.find("energy drift") != std::string::npos);

    SUBCASE("dissipative data read as ideal fails the drift check") {
        fs::path dcfg = dir / "dcfg.json";
        write_file(dcfg, R"({
            "system": {"kind": "dissipative-pendulum", "damping": 0.2},
            "data": {"n_train": 3, "n_test": 1, "states_per_traj": 30, "seed": 2}
        })");
        REQUIRE(run({"gen-data", "--config", dcfg.string(), "--out-dir", dir.string()}) == 0);
        std::string err;
        CHECK(run({"verify", "--system", "ideal-pendulum",
                   "--data", (dir / "train.csv").string()}, nullptr, &err) == 1);
        CHECK(err.find("drift") != std::string::npos);
        // Declared as dissipative, the same file passes the well-formed check.
        CHECK(run({"verify", "--system", "dissipative-pendulum", "--damping", "0.2",
                   "--data", (dir / "train.csv").string()}, &out) == 0);
        CHECK(out.find("well-formed") != std::string::npos);
    }
    SUBCASE("single-state trajectory file is rejected at load time") {
        write_file(dir / "bad.csv", "t,q,p\n0.0,1.0,0.0\n");
        CHECK(run({"verify", "--system", "ideal-pendulum",
                   "--data", (dir / "bad.csv").string()}) == 2);
    }
    fs::remove_all(dir);
}

TEST_CASE("bound sweep CSV") {
    fs::path dir = fresh_dir("conserve_cli_bound");

    SUBCASE("m sweep reproduces the closed form at m = 0") {
        fs::path cfg = dir / "cfg.json";
        write_file(cfg, R"({"bound": {"C": 1.0, "delta": 0.05, "n": 100, "d": 3}})");
        std::string out;
        REQUIRE(run({"bound", "--config", cfg.string(), "--out-dir", dir.string(),
                     "--sweep", "m", "--lo", "0", "--hi", "3", "--steps", "4"}, &out) == 0);
        auto rows = data_rows(dir / "bound.csv");
        REQUIRE(rows.size() == 4);
        auto cells = split_csv(rows[0]);
        REQUIRE(cells.size() == 6);
        CHECK(cells[0] == "m");
        CHECK(std::stod(cells[1]) == 0.0);
        CHECK(std::stod(cells[2]) ==
              doctest::Approx(std::sqrt(std::log(20.0) / 200.0)).epsilon(1e-9));
        CHECK(cells[5].empty()); // no per-row error
        // Conserved column is nondecreasing in m in the default regime.
        double prev = -1.0;
        for (const auto& row : rows) {
            double v = std::stod(split_csv(row)[2]);
            CHECK(v >= prev);
            prev = v;
        }
        // Unconserved column is constant (d fixed), equal to the last conserved row.
        CHECK(std::stod(split_csv(rows[3])[2]) ==
              doctest::Approx(std::stod(split_csv(rows[0])[3])).epsilon(1e-12));
    }
    SUBCASE("single-point sweep emits one row") {
        REQUIRE(run({"bound", "--out-dir", dir.string(), "--sweep", "n",
                     "--lo", "100", "--hi", "100", "--steps", "1"}) == 0);
        CHECK(data_rows(dir / "bound.csv").size() == 1);
    }
    SUBCASE("per-row domain errors are reported in the error column") {
        std::string out;
        REQUIRE(run({"bound", "--out-dir", dir.string(), "--sweep", "delta",
                     "--lo", "-0.5", "--hi", "0.5", "--steps", "3"}, &out) == 0);
        auto rows = data_rows(dir / "bound.csv");
        REQUIRE(rows.size() == 3);
        CHECK_FALSE(split_csv(rows[0])[5].empty()); // delta = -0.5 invalid
        CHECK_FALSE(split_csv(rows[1])[5].empty()); // delta = 0.0 invalid
        CHECK(split_csv(rows[2])[5].empty());       // delta = 0.5 valid
        CHECK(split_csv(rows[2])[2] != "");
        CHECK(out.find("2 domain errors") != std::string::npos);
    }
    fs::remove_all(dir);
}

TEST_CASE("train-noether, eval, and probe-inner-steps round trip") {
    fs::path dir = fresh_dir("conserve_cli_noe");
    fs::path cfg = dir / "cfg.json";
    write_file(cfg, R"({
        "system": {"kind": "ideal-spring"},
        "data": {"n_train": 4, "n_test": 3, "states_per_traj": 16, "seed": 6},
        "baseline": {"width": 12, "hidden_layers": 1, "epochs": 40, "lr": 0.003},
        "tailor": {"variant": "anchor", "inner_lr": 0.0, "horizon": 5,
                    "outer_lr": 0.002, "embed_lr": 0.002},
        "embedding": {"hidden": 6, "hidden_layers": 1, "out_dim": 1, "seed": 3},
        "train": {"epochs": 4},
        "final": {"eval_horizon": 6, "window_stride": 5},
        "probe": {"max_steps": 5, "lr": 0.0001}
    })");

    std::string out;
    REQUIRE(run({"train-noether", "--config", cfg.string(), "--out-dir", dir.string()},
                &out) == 0);
    REQUIRE(fs::exists(dir / "noether_checkpoint.json"));
    REQUIRE(fs::exists(dir / "noether_history.csv"));
    REQUIRE(fs::exists(dir / "noether_result.json"));

    auto rows = data_rows(dir / "noether_history.csv");
    REQUIRE(rows.size() == 4); // one row per epoch

    SUBCASE("zero inner rate makes tailored and untailored curves identical") {
        for (const auto& row : rows) {
            auto cells = split_csv(row);
            REQUIRE(cells.size() == 5);
            CHECK(cells[1] == cells[2]); // train columns
            CHECK(cells[3] == cells[4]); // val columns
        }
    }
    SUBCASE("rerun reproduces the history byte for byte") {
        std::string hist1 = slurp(dir / "noether_history.csv");
        REQUIRE(run({"train-noether", "--config", cfg.string(), "--out-dir", dir.string()}) ==
                0);
        CHECK(slurp(dir / "noether_history.csv") == hist1);
    }
    SUBCASE("eval emits per-horizon curves from the checkpoint") {
        REQUIRE(run({"eval", "--config", cfg.string(), "--out-dir", dir.string(),
                     "--checkpoint", (dir / "noether_checkpoint.json").string()}, &out) == 0);
        REQUIRE(fs::exists(dir / "metrics.json"));
        json metrics;
        std::ifstream(dir / "metrics.json") >> metrics;
        REQUIRE(metrics.at("horizon").size() == 6);
        REQUIRE(metrics.at("rmse_untailored").size() == 6);
        REQUIRE(metrics.at("rmse_tailored").size() == 6);
        CHECK(metrics.at("n_windows").get<int>() > 0);
        // Zero inner rate: both curves coincide.
        CHECK(metrics.at("aggregate_rmse_tailored").get<double>() ==
              doctest::Approx(metrics.at("aggregate_rmse_untailored").get<double>())
                  .epsilon(1e-12));
        // Error accumulates along the horizon on ideal data.
        double first = metrics.at("rmse_untailored")[0].get<double>();
        double last = metrics.at("rmse_untailored")[5].get<double>();
        CHECK(first <= last);
    }
    SUBCASE("eval on an empty test set is a domain error") {
        write_file(dir / "empty.csv", "t,q,p\n");
        std::string err;
        CHECK(run({"eval", "--config", cfg.string(), "--out-dir", dir.string(),
                   "--checkpoint", (dir / "noether_checkpoint.json").string(),
                   "--data", (dir / "empty.csv").string()}, nullptr, &err) == 1);
        CHECK(err.find("empty") != std::string::npos);
    }
    SUBCASE("probe-inner-steps writes the two-loss curve") {
        REQUIRE(run({"probe-inner-steps", "--config", cfg.string(), "--out-dir", dir.string(),
                     "--checkpoint", (dir / "noether_checkpoint.json").string()}, &out) == 0);
        auto curve = data_rows(dir / "probe.csv");
        REQUIRE(curve.size() == 6); // step 0 plus max_steps
        auto cells = split_csv(curve.front());
        REQUIRE(cells.size() == 3);
        CHECK(cells[0] == "0");
    }
    SUBCASE("missing checkpoint is an IO error") {
        CHECK(run({"eval", "--config", cfg.string(), "--out-dir", dir.string(),
                   "--checkpoint", (dir / "nothing.json").string()}) == 2);
    }
    fs::remove_all(dir);
}

TEST_CASE("train-baseline artifact") {
    fs::path dir = fresh_dir("conserve_cli_base");
    fs::path cfg = dir / "cfg.json";
    write_file(cfg, R"({
        "system": {"kind": "ideal-spring"},
        "data": {"n_train": 4, "n_test": 2, "states_per_traj": 12, "seed": 8},
        "baseline": {"width": 10, "hidden_layers": 1, "epochs": 25, "lr": 0.003}
    })");
    std::string out;
    REQUIRE(run({"train-baseline", "--config", cfg.string(), "--out-dir", dir.string()},
                &out) == 0);
    CHECK(out.find("25 epochs") != std::string::npos);
    json artifact;
    std::ifstream(dir / "baseline.json") >> artifact;
    CHECK(artifact.at("epochs") == 25);
    CHECK(artifact.at("loss_history").size() == 25);
    CHECK(artifact.at("model").at("hidden") == 10);
    CHECK(artifact.contains("config_hash"));

    SUBCASE("epoch override from the command line") {
        REQUIRE(run({"train-baseline", "--config", cfg.string(), "--out-dir", dir.string(),
                     "--epochs", "7"}) == 0);
        json a2;
        std::ifstream(dir / "baseline.json") >> a2;
        CHECK(a2.at("epochs") == 7);
        CHECK(a2.at("loss_history").size() == 7);
    }
    fs::remove_all(dir);
}

TEST_CASE("discover runs end to end from a config file") {
    fs::path dir = fresh_dir("conserve_cli_disc");
    fs::path cfg = dir / "cfg.json";
    write_file(cfg, R"({
        "system": {"kind": "ideal-spring"},
        "data": {"n_train": 6, "n_test": 4, "states_per_traj": 20, "seed": 3},
        "enumeration": {"max_depth": 4, "max_params": 1},
        "fit": {"steps": 120},
        "baseline": {"width": 24, "hidden_layers": 1, "epochs": 120, "lr": 0.003},
        "tailor": {"horizon": 5, "outer_lr": 0.003, "embed_lr": 0.003},
        "screen": {"n_null": 8},
        "select": {"metatailor_epochs": 3, "inner_lr_grid": [0.001, 0.01, 0.1]},
        "final": {"final_epochs": 3, "eval_horizon": 8}
    })");
    std::string out;
    REQUIRE(run({"discover", "--config", cfg.string(), "--out-dir", dir.string()}, &out) == 0);
    CHECK(out.find("winner:") != std::string::npos);
    CHECK(out.find("test rmse") != std::string::npos);

    json result_json;
    std::ifstream(dir / "result.json") >> result_json;
    CHECK(result_json.at("config").at("enumeration").at("max_depth") == 4);
    CHECK(result_json.at("winner").at("sexpr").get<std::string>().find("(add") == 0);
    REQUIRE(fs::exists(dir / "final.json"));
    REQUIRE(fs::exists(dir / "final_model.json"));

    REQUIRE(fs::exists(dir / "screen.csv"));
    auto rows = data_rows(dir / "screen.csv");
    json enumerate_json;
    std::ifstream(dir / "enumerate.json") >> enumerate_json;
    CHECK(rows.size() == enumerate_json.at("count").get<std::size_t>());

    SUBCASE("checkpoint from the pipeline drives eval") {
        REQUIRE(run({"eval", "--config", cfg.string(), "--out-dir", dir.string()}, &out) == 0);
        CHECK(fs::exists(dir / "metrics.json"));
    }
    fs::remove_all(dir);
}
