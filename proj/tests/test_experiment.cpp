#include <fstream>
#include <sstream>

#include "cafe/experiment.hpp"
#include "doctest.h"
#include "fixtures.hpp"

using namespace cafe;
using namespace cafe::exp;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small enough that the whole pipeline runs in seconds.
RunConfig tiny_config(const fs::path& dir) {
    RunConfig c;
    c.output_dir = dir.string();
    c.seed = 5;
    c.dataset.train_size = 48;
    c.dataset.test_size = 24;
    c.attack.train_steps = 2;
    c.attack.train_step_size = 4.0 / 255;
    c.attack.eval_steps = 3;
    c.attack.eval_step_size = 3.0 / 255;
    c.attack.cw_iters = 5;
    c.pretrain.optim.epochs = 2;
    c.pretrain.optim.batch_size = 16;
    c.pretrain.attack_warmup_epochs = 0;
    c.amr.epochs = 1;
    c.amr.batch_size = 16;
    c.inversion.steps = 2;
    c.defense.optim.epochs = 1;
    c.defense.optim.batch_size = 16;
    c.defense.attack_warmup_epochs = 0;
    c.ablation.rademacher_draws = 100;
    c.evaluate.rademacher_draws = 100;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

std::string first_line(const fs::path& p) {
    std::ifstream in(p);
    std::string line;
    std::getline(in, line);
    return line;
}

}  // namespace

TEST_CASE("config round-trips through JSON and rejects unknown keys") {
    RunConfig c;
    c.seed = 17;
    c.amr.lambda_reg = 0.25;
    c.defense.kinds = {defense::DefenseKind::Trades};
    c.evaluate.pearson = analysis::PearsonMode::Global;
    const auto back = config_from_json(to_json(c));
    CHECK(to_json(back) == to_json(c));
    CHECK(run_id(back) == run_id(c));

    RunConfig moved = c;
    moved.output_dir = "elsewhere";
    CHECK(run_id(moved) == run_id(c));
    moved.seed = 18;
    CHECK(run_id(moved) != run_id(c));

    CHECK_THROWS_WITH_AS(config_from_json(json{{"amr", {{"lamda", 1.0}}}}), doctest::Contains("amr.lamda"), ConfigError);
    CHECK_THROWS_WITH_AS(config_from_json(json{{"sed", 1}}), doctest::Contains("sed"), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"seed", "one"}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"defense", {{"kinds", {"mart"}}}}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"defense", {{"seeds", {1, 1}}}}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json{{"evaluate", {{"attacks", {"dlr"}}}}}), ConfigError);
    CHECK_THROWS_AS(config_from_json(json::array()), ConfigError);

    const auto eps = config_from_json(json{{"attack", {{"eps", "4/255"}}}});
    CHECK(eps.attack.eps == doctest::Approx(4.0 / 255));
    CHECK(eps.inversion.gamma == eps.attack.eps);
    CHECK(config_from_json(json::object()).model.num_classes == 3);
}

TEST_CASE("config files") {
    const auto dir = testutil::temp_dir("config_files");
    CHECK_THROWS_AS(load_config(dir / "absent.json"), ConfigError);
    std::ofstream(dir / "broken.json") << "{\"seed\": ";
    CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
    write_json(dir / "ok.json", json{{"seed", 3}, {"dataset", {{"train_size", 100}}}});
    const auto c = load_config(dir / "ok.json");
    CHECK(c.seed == 3);
    CHECK(c.dataset.train_size == 100);
}

TEST_CASE("stage names") {
    for (auto s : all_stages()) CHECK(parse_stage(to_string(s)) == s);
    CHECK(to_string(Stage::FitAmr) == "fit-amr");
    CHECK_THROWS_AS(parse_stage("deploy"), ExperimentError);
}

TEST_CASE("metrics records carry monotone steps") {
    const auto dir = testutil::temp_dir("metrics_writer");
    MetricsWriter w(dir / "m.jsonl", "abc", "pretrain");
    w.write("x", {{"loss", 1.0}});
    w.write("x", {{"loss", 0.5}});
    std::ifstream in(dir / "m.jsonl");
    std::string line;
    int expected = 0;
    while (std::getline(in, line)) {
        const auto j = json::parse(line);
        CHECK(j.at("step") == expected++);
        CHECK(j.at("run") == "abc");
        CHECK(j.at("stage") == "pretrain");
    }
    CHECK(expected == 2);
}

TEST_CASE("stages need their inputs and name the missing stage") {
    const auto dir = testutil::temp_dir("missing_dependency");
    const auto cfg = tiny_config(dir);
    for (auto s : {Stage::FitAmr, Stage::Evaluate, Stage::Ablate})
        CHECK_THROWS_WITH_AS(run_stage(s, cfg, {false, true}), doctest::Contains("'pretrain'"), ExperimentError);
    CHECK_THROWS_WITH_AS(run_stage(Stage::Invert, cfg, {false, true}), doctest::Contains("'fit-amr'"), ExperimentError);
    CHECK_THROWS_WITH_AS(run_stage(Stage::TrainCafe, cfg, {false, true}), doctest::Contains("'invert'"), ExperimentError);
    CHECK_THROWS_AS(emit_report(dir), ExperimentError);
}

TEST_CASE("pipeline on a tiny config: dependency contract, reports and determinism") {
    const auto dir = testutil::temp_dir("tiny_pipeline");
    const auto cfg = tiny_config(dir / "a");
    const StageOptions quiet{false, true};
    const RunLayout layout{cfg.output_dir};

    run_stage(Stage::Pretrain, cfg, quiet);
    CHECK(fs::exists(layout.classifier()));
    CHECK(fs::exists(layout.resolved_config()));
    CHECK_THROWS_WITH_AS(run_stage(Stage::Pretrain, cfg, quiet), doctest::Contains("already completed"), ExperimentError);
    auto other = cfg;
    other.seed = 6;
    CHECK_THROWS_WITH_AS(run_stage(Stage::FitAmr, other, quiet), doctest::Contains("different config"), ExperimentError);

    SUBCASE("evaluate on a pretrain-only run marks conjunctions unavailable") {
        run_stage(Stage::Evaluate, cfg, quiet);
        const auto s = read_json(layout.summary()).at("stages").at("evaluate");
        CHECK(s.at("conjunctions").is_string());
        CHECK(s.at("conjunctions").get<std::string>().find("unavailable") == 0);
        CHECK(s.at("defense").is_string());
        CHECK(s.at("robustness").at("pgd").is_number());
        const auto files = emit_report(cfg.output_dir);
        CHECK(first_line(layout.report_dir() / "diagnostics.csv") == "acc_T,acc_Z,rho");
        CHECK_FALSE(fs::exists(layout.report_dir() / "conjunctions.csv"));
        CHECK(std::find(files.begin(), files.end(), layout.report_dir() / "diagnostics.png") != files.end());
    }

    SUBCASE("full pipeline") {
        for (auto s : {Stage::FitAmr, Stage::Invert, Stage::TrainCafe, Stage::Evaluate, Stage::Ablate}) run_stage(s, cfg, quiet);
        const auto summary = read_json(layout.summary());
        CHECK(summary.at("run") == run_id(cfg));
        for (auto s : all_stages()) CHECK(summary.at("stages").contains(to_string(s)));
        const auto& ev = summary.at("stages").at("evaluate");
        CHECK(ev.at("violations") == 0);
        CHECK(summary.at("stages").at("invert").at("violations") == 0);
        CHECK(ev.at("conjunctions").at("pgd").contains("ac"));
        CHECK(ev.at("defense").size() == 2);
        CHECK(summary.at("stages").at("ablate").at("points").size() == cfg.ablation.lambdas.size());

        // top-level metrics are the stage files concatenated in pipeline order
        std::string joined;
        for (auto s : all_stages()) joined += slurp(layout.stage_dir(s) / "metrics.jsonl");
        CHECK(slurp(layout.metrics()) == joined);
        // wall-clock lives in its own file
        CHECK(slurp(layout.metrics()).find("seconds") == std::string::npos);
        CHECK(slurp(layout.timing()).find("seconds") != std::string::npos);

        emit_report(cfg.output_dir);
        CHECK(first_line(layout.report_dir() / "conjunctions.csv") == "attack,Adv,CF,CC,AC");
        CHECK(first_line(layout.report_dir() / "diagnostics.csv") == "acc_T,acc_Z,rho");
        CHECK(first_line(layout.report_dir() / "defense.csv") == "defense,model,seed,natural,fgsm,pgd,cw");
        const auto defense_csv = slurp(layout.report_dir() / "defense.csv");
        CHECK(defense_csv.find("\nADV,baseline,") != std::string::npos);
        CHECK(defense_csv.find("\nADV_CAFE,cafe,") != std::string::npos);
        CHECK(first_line(layout.report_dir() / "ablation.csv").rfind("lambda,rademacher_median", 0) == 0);
        for (const char* png : {"conjunctions.png", "diagnostics.png", "defense.png", "rademacher.png", "imbalance.png"})
            CHECK(fs::file_size(layout.report_dir() / png) > 0);

        // an identical rerun elsewhere reproduces every stage's numbers
        const auto again = tiny_config(dir / "b");
        run_pipeline(again, {}, quiet);
        CHECK(slurp(RunLayout{again.output_dir}.summary()) == slurp(layout.summary()));
        CHECK(slurp(RunLayout{again.output_dir}.metrics()) == slurp(layout.metrics()));
        CHECK(slurp(RunLayout{again.output_dir}.classifier()) == slurp(layout.classifier()));

        // forcing a stage replaces only that stage
        const auto before = slurp(layout.stage_dir(Stage::Pretrain) / "summary.json");
        run_stage(Stage::Evaluate, cfg, {true, true});
        CHECK(slurp(layout.stage_dir(Stage::Pretrain) / "summary.json") == before);
        CHECK(read_json(layout.summary()) == summary);
    }
}
