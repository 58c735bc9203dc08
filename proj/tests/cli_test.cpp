// End-to-end tests for the clvar binary: each test spawns the real executable
// and checks exit codes, the one-line stderr contract, and output files.

#include <gtest/gtest.h>
#include <json.hpp>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace {

namespace fs = std::filesystem;

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

fs::path fresh_directory(const std::string& stem) {
    const fs::path dir = fs::temp_directory_path() / stem;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

RunResult run_cli(const std::string& args) {
    static const fs::path scratch = fresh_directory("clvar_cli_streams");
    const fs::path out_path = scratch / "stdout.txt";
    const fs::path err_path = scratch / "stderr.txt";
    const std::string command = std::string("\"") + CLVAR_CLI_PATH + "\" " + args + " > \"" +
                                out_path.string() + "\" 2> \"" + err_path.string() + "\"";
    const int raw = std::system(command.c_str());
    RunResult result;
    result.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
    result.out = read_file(out_path);
    result.err = read_file(err_path);
    return result;
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(line);
    }
    return lines;
}

// Small K=3 panel with enough texture for standardization and CV.
void write_toy_panel(const fs::path& path, int rows, unsigned seed) {
    std::mt19937 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::ofstream out(path);
    out << "a,b,c\n";
    double a = 0.0, b = 0.0, c = 0.0;
    for (int t = 0; t < rows; ++t) {
        a = 0.6 * a + noise(rng);
        b = 0.4 * b + 0.3 * a + noise(rng);
        c = 0.5 * c + noise(rng);
        out << a << ',' << b << ',' << c << '\n';
    }
}

int count_dot_edges(const std::string& dot) {
    int edges = 0;
    for (const auto& line : lines_of(dot)) {
        if (line.find("->") != std::string::npos) {
            ++edges;
        }
    }
    return edges;
}

int count_csv_edges(const std::string& csv) {
    const auto lines = lines_of(csv);
    int edges = 0;
    for (size_t i = 1; i < lines.size(); ++i) {
        std::istringstream row(lines[i]);
        std::string cell;
        std::getline(row, cell, ',');  // node name
        while (std::getline(row, cell, ',')) {
            edges += (cell == "1") ? 1 : 0;
        }
    }
    return edges;
}

TEST(Usage, HelpEverywhereAndBadInvocations) {
    const RunResult top = run_cli("--help");
    EXPECT_EQ(top.code, 0);
    EXPECT_NE(top.out.find("generate"), std::string::npos);
    EXPECT_NE(top.out.find("experiment"), std::string::npos);
    EXPECT_NE(top.out.find("1-based"), std::string::npos);

    for (const std::string sub : {"generate", "fit", "forecast", "graph", "experiment"}) {
        const RunResult help = run_cli(sub + " --help");
        EXPECT_EQ(help.code, 0) << sub;
        EXPECT_NE(help.out.find("--out"), std::string::npos) << sub;
    }
    EXPECT_NE(run_cli("fit --help").out.find("--train-rows"), std::string::npos);

    const RunResult none = run_cli("");
    EXPECT_EQ(none.code, 1);
    EXPECT_EQ(none.err.rfind("[usage-error]", 0), 0u);
    EXPECT_EQ(lines_of(none.err).size(), 1u);

    const RunResult unknown = run_cli("frobnicate");
    EXPECT_EQ(unknown.code, 1);
    EXPECT_EQ(unknown.err.rfind("[usage-error]", 0), 0u);
}

TEST(Generate, WritesPanelAndTruthDeterministically) {
    const fs::path dir = fresh_directory("clvar_cli_generate");
    const std::string base =
        "generate --design 1 --seed 7 --length 120 --out \"" + (dir / "one").string() + "\"";
    const RunResult first = run_cli(base);
    ASSERT_EQ(first.code, 0) << first.err;

    const std::string panel = read_file(dir / "one" / "panel.csv");
    const auto panel_lines = lines_of(panel);
    ASSERT_EQ(panel_lines.size(), 121u);  // header + 120 rows
    EXPECT_EQ(panel_lines[0], "s1,s2,s3,s4,s5,s6,s7,s8,s9,s10");

    const auto truth = nlohmann::json::parse(read_file(dir / "one" / "truth.json"));
    EXPECT_EQ(truth["design"]["design_id"].get<int>(), 1);
    EXPECT_EQ(truth["lag_order"].get<int>(), 5);
    EXPECT_EQ(truth["seed"].get<unsigned long long>(), 7u);
    EXPECT_EQ(truth["coefficients"].size(), 10u * 5u * 10u);

    const RunResult second = run_cli(
        "generate --design 1 --seed 7 --length 120 --out \"" + (dir / "two").string() + "\"");
    ASSERT_EQ(second.code, 0);
    EXPECT_EQ(read_file(dir / "two" / "panel.csv"), panel);
    EXPECT_EQ(read_file(dir / "two" / "truth.json"), read_file(dir / "one" / "truth.json"));

    const RunResult other_seed = run_cli(
        "generate --design 1 --seed 8 --length 120 --out \"" + (dir / "three").string() + "\"");
    ASSERT_EQ(other_seed.code, 0);
    EXPECT_NE(read_file(dir / "three" / "panel.csv"), panel);

    const RunResult bad = run_cli("generate --design 9 --seed 1 --length 50 --out \"" +
                                  (dir / "bad").string() + "\"");
    EXPECT_EQ(bad.code, 1);
    EXPECT_EQ(bad.err.rfind("[usage-error]", 0), 0u);
}

TEST(Fit, HyperFileFlowAndFailureModes) {
    const fs::path dir = fresh_directory("clvar_cli_fit");
    ASSERT_EQ(run_cli("generate --design 3 --seed 3 --length 260 --out \"" + dir.string() + "\"")
                  .code,
              0);
    const std::string data = (dir / "panel.csv").string();

    std::ofstream(dir / "hyper.json") << R"({"lambda": 0.5})";
    const std::string fit_ar = "fit --method ar --data \"" + data +
                               "\" --train-rows 1..200 --hyper \"" + (dir / "hyper.json").string() +
                               "\" --out \"" + (dir / "ar.json").string() + "\"";
    const RunResult ar = run_cli(fit_ar);
    ASSERT_EQ(ar.code, 0) << ar.err;
    EXPECT_NE(ar.out.find("method=AR"), std::string::npos);

    const auto ar_doc = nlohmann::json::parse(read_file(dir / "ar.json"));
    EXPECT_EQ(ar_doc["learner_tag"].get<std::string>(), "AR");
    EXPECT_EQ(ar_doc["lag_order"].get<int>(), 5);
    EXPECT_FALSE(ar_doc.contains("chosen_hyperparameters"));

    // Same invocation twice produces the same bytes.
    const std::string ar_bytes = read_file(dir / "ar.json");
    ASSERT_EQ(run_cli(fit_ar).code, 0);
    EXPECT_EQ(read_file(dir / "ar.json"), ar_bytes);

    std::ofstream(dir / "clvar_hyper.json") << R"({"lambda": 0.5, "kappa": 1.0, "rank": 2})";
    const RunResult cl = run_cli("fit --method clvar --data \"" + data +
                                 "\" --train-rows 1..200 --hyper \"" +
                                 (dir / "clvar_hyper.json").string() + "\" --out \"" +
                                 (dir / "clvar.json").string() + "\"");
    ASSERT_EQ(cl.code, 0) << cl.err;
    const auto cl_doc = nlohmann::json::parse(read_file(dir / "clvar.json"));
    EXPECT_EQ(cl_doc["learner_tag"].get<std::string>(), "CLVAR");
    ASSERT_TRUE(cl_doc.contains("clvar_factors"));
    EXPECT_EQ(cl_doc["clvar_factors"]["rank"].get<int>(), 2);

    const RunResult unknown = run_cli("fit --method svm --data \"" + data +
                                      "\" --train-rows 1..200 --cv --out \"" +
                                      (dir / "x.json").string() + "\"");
    EXPECT_EQ(unknown.code, 1);
    EXPECT_EQ(unknown.err.rfind("[usage-error]", 0), 0u);

    const RunResult neither = run_cli("fit --method ar --data \"" + data +
                                      "\" --train-rows 1..200 --out \"" +
                                      (dir / "x.json").string() + "\"");
    EXPECT_EQ(neither.code, 1);

    const RunResult both = run_cli("fit --method ar --data \"" + data +
                                   "\" --train-rows 1..200 --cv --hyper \"" +
                                   (dir / "hyper.json").string() + "\" --out \"" +
                                   (dir / "x.json").string() + "\"");
    EXPECT_EQ(both.code, 1);

    const RunResult bad_range = run_cli("fit --method ar --data \"" + data +
                                        "\" --train-rows 200..100 --hyper \"" +
                                        (dir / "hyper.json").string() + "\" --out \"" +
                                        (dir / "x.json").string() + "\"");
    EXPECT_EQ(bad_range.code, 1);

    const RunResult out_of_panel = run_cli("fit --method ar --data \"" + data +
                                           "\" --train-rows 1..400 --hyper \"" +
                                           (dir / "hyper.json").string() + "\" --out \"" +
                                           (dir / "x.json").string() + "\"");
    EXPECT_EQ(out_of_panel.code, 2);
    EXPECT_EQ(out_of_panel.err.rfind("[data-error]", 0), 0u);

    const RunResult missing_data = run_cli("fit --method ar --data \"" + (dir / "no.csv").string() +
                                           "\" --train-rows 1..200 --hyper \"" +
                                           (dir / "hyper.json").string() + "\" --out \"" +
                                           (dir / "x.json").string() + "\"");
    EXPECT_EQ(missing_data.code, 2);
}

TEST(Fit, CvRecordsChosenHyperparameters) {
    const fs::path dir = fresh_directory("clvar_cli_cv");
    write_toy_panel(dir / "panel.csv", 48, 99);

    const RunResult ridge = run_cli("fit --method varl2 --data \"" +
                                    (dir / "panel.csv").string() +
                                    "\" --train-rows 1..48 --lag 1 --cv --out \"" +
                                    (dir / "ridge.json").string() + "\"");
    ASSERT_EQ(ridge.code, 0) << ridge.err;
    const auto ridge_doc = nlohmann::json::parse(read_file(dir / "ridge.json"));
    ASSERT_TRUE(ridge_doc.contains("chosen_hyperparameters"));
    EXPECT_TRUE(ridge_doc["chosen_hyperparameters"]["lambda"].is_number());
    EXPECT_TRUE(ridge_doc["chosen_hyperparameters"]["cv_mse"].is_number());
    EXPECT_FALSE(ridge_doc["chosen_hyperparameters"].contains("kappa"));

    const RunResult cl = run_cli("fit --method clvar --data \"" + (dir / "panel.csv").string() +
                                 "\" --train-rows 1..48 --lag 1 --cv --out \"" +
                                 (dir / "clvar.json").string() + "\"");
    ASSERT_EQ(cl.code, 0) << cl.err;
    const auto cl_doc = nlohmann::json::parse(read_file(dir / "clvar.json"));
    ASSERT_TRUE(cl_doc.contains("chosen_hyperparameters"));
    const auto& chosen = cl_doc["chosen_hyperparameters"];
    EXPECT_TRUE(chosen["lambda"].is_number());
    EXPECT_TRUE(chosen["kappa"].is_number());
    EXPECT_TRUE(chosen["rank"].is_number_integer());
    // The model document itself must agree with the recorded rank.
    EXPECT_EQ(cl_doc["clvar_factors"]["rank"].get<int>(), chosen["rank"].get<int>());
}

TEST(Forecast, RollingHoldoutContract) {
    const fs::path dir = fresh_directory("clvar_cli_forecast");
    ASSERT_EQ(run_cli("generate --design 3 --seed 3 --length 260 --out \"" + dir.string() + "\"")
                  .code,
              0);
    const std::string data = (dir / "panel.csv").string();
    std::ofstream(dir / "hyper.json") << R"({"lambda": 0.5})";
    ASSERT_EQ(run_cli("fit --method ar --data \"" + data + "\" --train-rows 1..200 --hyper \"" +
                      (dir / "hyper.json").string() + "\" --out \"" + (dir / "ar.json").string() +
                      "\"")
                  .code,
              0);

    const RunResult fc = run_cli("forecast --model \"" + (dir / "ar.json").string() +
                                 "\" --data \"" + data + "\" --holdout-rows 201..260 --out \"" +
                                 (dir / "fc.csv").string() + "\"");
    ASSERT_EQ(fc.code, 0) << fc.err;
    EXPECT_EQ(fc.out.rfind("mse=", 0), 0u);
    const double reported = std::stod(fc.out.substr(4));
    EXPECT_GT(reported, 0.0);

    const auto fc_lines = lines_of(read_file(dir / "fc.csv"));
    ASSERT_EQ(fc_lines.size(), 61u);  // header + 60 hold-out rows
    EXPECT_EQ(fc_lines[0].rfind("row,pred_s1,", 0), 0u);
    EXPECT_NE(fc_lines[0].find("sqerr_s10"), std::string::npos);
    EXPECT_EQ(fc_lines[1].substr(0, 4), "201,");

    // A fully regularized lasso keeps no weights: every prediction is zero.
    std::ofstream(dir / "big.json") << R"({"lambda": 1e9})";
    ASSERT_EQ(run_cli("fit --method varl1 --data \"" + data + "\" --train-rows 1..200 --hyper \"" +
                      (dir / "big.json").string() + "\" --out \"" + (dir / "zero.json").string() +
                      "\"")
                  .code,
              0);
    const RunResult zero = run_cli("forecast --model \"" + (dir / "zero.json").string() +
                                   "\" --data \"" + data + "\" --holdout-rows 201..260 --out \"" +
                                   (dir / "zero.csv").string() + "\"");
    ASSERT_EQ(zero.code, 0);
    const auto zero_lines = lines_of(read_file(dir / "zero.csv"));
    for (size_t i = 1; i < zero_lines.size(); ++i) {
        std::istringstream row(zero_lines[i]);
        std::string cell;
        std::getline(row, cell, ',');  // row index
        for (int c = 0; c < 10; ++c) {
            std::getline(row, cell, ',');
            EXPECT_EQ(cell, "0") << "prediction row " << i;
        }
    }

    // Hold-out that precedes any usable history is a data error.
    const RunResult early = run_cli("forecast --model \"" + (dir / "ar.json").string() +
                                    "\" --data \"" + data + "\" --holdout-rows 2..4 --out \"" +
                                    (dir / "x.csv").string() + "\"");
    EXPECT_EQ(early.code, 2);
    EXPECT_EQ(early.err.rfind("[data-error]", 0), 0u);

    const RunResult beyond = run_cli("forecast --model \"" + (dir / "ar.json").string() +
                                     "\" --data \"" + data + "\" --holdout-rows 250..300 --out \"" +
                                     (dir / "x.csv").string() + "\"");
    EXPECT_EQ(beyond.code, 2);
}

TEST(Graph, DotAndCsvAgreeAndTolIsMonotone) {
    const fs::path dir = fresh_directory("clvar_cli_graph");
    ASSERT_EQ(run_cli("generate --design 3 --seed 5 --length 260 --out \"" + dir.string() + "\"")
                  .code,
              0);
    const std::string data = (dir / "panel.csv").string();

    std::ofstream(dir / "hyper.json") << R"({"lambda": 0.5})";
    ASSERT_EQ(run_cli("fit --method ar --data \"" + data + "\" --train-rows 1..200 --hyper \"" +
                      (dir / "hyper.json").string() + "\" --out \"" + (dir / "ar.json").string() +
                      "\"")
                  .code,
              0);

    const RunResult ar_graph = run_cli("graph --model \"" + (dir / "ar.json").string() +
                                       "\" --format dot --out \"" + (dir / "ar.dot").string() +
                                       "\"");
    ASSERT_EQ(ar_graph.code, 0) << ar_graph.err;
    EXPECT_EQ(ar_graph.out.rfind("edge_density=0", 0), 0u);
    const std::string ar_dot = read_file(dir / "ar.dot");
    EXPECT_EQ(ar_dot.rfind("digraph", 0), 0u);
    EXPECT_EQ(count_dot_edges(ar_dot), 0);

    std::ofstream(dir / "clvar_hyper.json") << R"({"lambda": 0.5, "kappa": 1.0, "rank": 2})";
    ASSERT_EQ(run_cli("fit --method clvar --data \"" + data + "\" --train-rows 1..200 --hyper \"" +
                      (dir / "clvar_hyper.json").string() + "\" --out \"" +
                      (dir / "clvar.json").string() + "\"")
                  .code,
              0);

    const RunResult dot = run_cli("graph --model \"" + (dir / "clvar.json").string() +
                                  "\" --format dot --out \"" + (dir / "g.dot").string() + "\"");
    const RunResult csv = run_cli("graph --model \"" + (dir / "clvar.json").string() +
                                  "\" --format csv --out \"" + (dir / "g.csv").string() + "\"");
    ASSERT_EQ(dot.code, 0);
    ASSERT_EQ(csv.code, 0);
    EXPECT_EQ(dot.out, csv.out);  // same printed density
    const std::string csv_text = read_file(dir / "g.csv");
    EXPECT_EQ(lines_of(csv_text)[0], "from,s1,s2,s3,s4,s5,s6,s7,s8,s9,s10");
    EXPECT_EQ(count_dot_edges(read_file(dir / "g.dot")), count_csv_edges(csv_text));

    // Raising the tolerance can only drop edges; at 1e9 nothing survives.
    const RunResult strict = run_cli("graph --model \"" + (dir / "clvar.json").string() +
                                     "\" --tol 1e9 --format dot --out \"" +
                                     (dir / "strict.dot").string() + "\"");
    ASSERT_EQ(strict.code, 0);
    EXPECT_LE(count_dot_edges(read_file(dir / "strict.dot")),
              count_dot_edges(read_file(dir / "g.dot")));
    EXPECT_EQ(count_dot_edges(read_file(dir / "strict.dot")), 0);

    const RunResult bad_tol = run_cli("graph --model \"" + (dir / "clvar.json").string() +
                                      "\" --tol -1 --format dot --out \"" +
                                      (dir / "x.dot").string() + "\"");
    EXPECT_EQ(bad_tol.code, 1);

    const RunResult bad_format = run_cli("graph --model \"" + (dir / "clvar.json").string() +
                                         "\" --format yaml --out \"" + (dir / "x.g").string() +
                                         "\"");
    EXPECT_EQ(bad_format.code, 1);
}

TEST(Experiment, SmokePlanIsDeterministic) {
    const fs::path dir = fresh_directory("clvar_cli_experiment");
    nlohmann::json plan = {
        {"dataset", {{"type", "synthetic"}, {"design", 3}}},
        {"training_sizes", {60}},
        {"holdout_length", 40},
        {"resamples", 1},
        {"methods", {"AR", "VARL2"}},
        {"base_seed", 5},
        {"lag", 2},
        {"grids",
         {{"lambdas", {0.1, 1.0}}, {"kappas", {1.0}}, {"ranks", {1}}}},
    };
    std::ofstream(dir / "plan.json") << plan.dump(2);

    const RunResult first = run_cli("experiment --plan \"" + (dir / "plan.json").string() +
                                    "\" --out \"" + (dir / "one").string() + "\" --threads 2");
    ASSERT_EQ(first.code, 0) << first.err;
    const std::string report = read_file(dir / "one" / "report.csv");
    EXPECT_EQ(lines_of(report)[0],
              "method,training_size,resample,status,rel_mse,selection_error,edge_density,"
              "outer_iterations,lambda,kappa,rank");
    EXPECT_EQ(lines_of(report).size(), 3u);  // header + 2 method rows
    EXPECT_TRUE(fs::exists(dir / "one" / "timings.csv"));
    EXPECT_TRUE(fs::exists(dir / "one" / "summary.json"));
    EXPECT_TRUE(fs::exists(dir / "one" / "synthesis_AR.csv"));

    const RunResult second = run_cli("experiment --plan \"" + (dir / "plan.json").string() +
                                     "\" --out \"" + (dir / "two").string() + "\" --threads 1");
    ASSERT_EQ(second.code, 0);
    EXPECT_EQ(read_file(dir / "two" / "report.csv"), report);
    EXPECT_EQ(read_file(dir / "two" / "summary.json"), read_file(dir / "one" / "summary.json"));

    const RunResult missing = run_cli("experiment --plan \"" + (dir / "no.json").string() +
                                      "\" --out \"" + (dir / "x").string() + "\"");
    EXPECT_EQ(missing.code, 2);
    EXPECT_EQ(missing.err.rfind("[data-error]", 0), 0u);

    std::ofstream(dir / "broken.json") << "{\"dataset\": 3}";
    const RunResult broken = run_cli("experiment --plan \"" + (dir / "broken.json").string() +
                                     "\" --out \"" + (dir / "x").string() + "\"");
    EXPECT_EQ(broken.code, 2);
}

}  // namespace
