#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/amr_gmm.hpp"
#include "cafe/attack.hpp"
#include "cafe/cafe_defense.hpp"
#include "cafe/causal_analysis.hpp"
#include "cafe/causal_inversion.hpp"
#include "cafe/data.hpp"
#include "json.hpp"

namespace cafe::exp {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ExperimentError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Attack recipes shared by every stage.
struct AttackConfig {
    double eps = attack::kDefaultEps;
    int train_steps = 10;
    double train_step_size = 0.0072;
    int eval_steps = 30;
    double eval_step_size = 0.0023;
    int cw_iters = 100;
    double kappa = 0.0;

    attack::PerturbationBudget train_budget() const { return {eps, train_steps, train_step_size, true}; }
    attack::AttackSpec train_spec() const;
    /// kind is fgsm, pgd or cw.
    attack::AttackSpec eval_spec(const std::string& kind) const;
};

struct PretrainConfig {
    defense::OptimizerConfig optim;
    int attack_warmup_epochs = 3;
};

struct AblationConfig {
    std::vector<double> lambdas{0.0, 1.0};
    int rademacher_draws = 1000;
};

struct DefenseStageConfig {
    std::vector<defense::DefenseKind> kinds{defense::DefenseKind::Adv};
    std::vector<std::uint64_t> seeds{1};
    double trades_beta = 6.0;
    double cafe_weight = 1.0;
    defense::CafeTarget cafe_target = defense::CafeTarget::Inversion;
    bool refresh_inversions = false;
    defense::OptimizerConfig optim;
    int attack_warmup_epochs = 3;
};

struct EvaluateConfig {
    std::vector<std::string> attacks{"fgsm", "pgd", "cw"};
    analysis::PearsonMode pearson = analysis::PearsonMode::PerSample;
    int rademacher_draws = 1000;
    int chunk = 256;
};

/// Everything a run depends on. Serialises to JSON; parsing rejects
/// unknown keys. Omitted keys keep the defaults below.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    data::DatasetSpec dataset;
    zoo::ArchSpec model;  // num_classes is taken from the dataset
    AttackConfig attack;
    PretrainConfig pretrain;
    amr::AmrFitConfig amr;
    AblationConfig ablation;
    inversion::InversionConfig inversion;
    DefenseStageConfig defense;
    EvaluateConfig evaluate;

    RunConfig();
    void validate() const;
};

nlohmann::json to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);
/// Stable identifier of a resolved config: hex FNV-1a of its JSON text with
/// output_dir left out, so a moved run directory keeps its id.
std::string run_id(const RunConfig& cfg);

enum class Stage { Pretrain, FitAmr, Invert, TrainCafe, Evaluate, Ablate };
std::string to_string(Stage s);
Stage parse_stage(const std::string& s);
const std::vector<Stage>& all_stages();

/// Files of a run directory. Every stage owns `<root>/<stage>/` and writes
/// its metrics.jsonl, summary.json and artifacts there; the top-level
/// metrics.jsonl and summary.json are rebuilt from the stage directories.
struct RunLayout {
    std::filesystem::path root;

    std::filesystem::path stage_dir(Stage s) const { return root / to_string(s); }
    std::filesystem::path resolved_config() const { return root / "config.resolved.json"; }
    std::filesystem::path summary() const { return root / "summary.json"; }
    std::filesystem::path metrics() const { return root / "metrics.jsonl"; }
    std::filesystem::path timing() const { return root / "timing.jsonl"; }
    std::filesystem::path report_dir() const { return root / "report"; }

    std::filesystem::path classifier() const { return stage_dir(Stage::Pretrain) / "classifier.ckpt"; }
    std::filesystem::path hypothesis() const { return stage_dir(Stage::FitAmr) / "hypothesis.ckpt"; }
    std::filesystem::path test_function() const { return stage_dir(Stage::FitAmr) / "test_function.ckpt"; }
    std::filesystem::path inversions() const { return stage_dir(Stage::Invert) / "inversions.ckpt"; }
    bool completed(Stage s) const { return std::filesystem::exists(stage_dir(s) / "summary.json"); }
};

/// One line of metrics.jsonl.
struct MetricsRecord {
    std::string run;
    std::string stage;
    int step = 0;
    std::string tag;  // which model or sweep point the record belongs to
    nlohmann::json metrics = nlohmann::json::object();

    nlohmann::json to_json() const;
};

/// Appends records to a stage's metrics.jsonl; steps must increase.
class MetricsWriter {
public:
    MetricsWriter(std::filesystem::path path, std::string run, std::string stage);
    void write(const std::string& tag, nlohmann::json metrics);
    int next_step() const { return step_; }

private:
    std::filesystem::path path_;
    std::string run_, stage_;
    int step_ = 0;
};

struct StageOptions {
    bool force = false;  // replace this stage's own directory if it exists
    bool quiet = false;
};

/// Runs one stage. Requires the stages it reads from to be complete and
/// refuses to overwrite a completed stage unless options.force is set.
/// Writes the resolved config on first use and refuses a run directory whose
/// resolved config differs from `cfg` in anything but output_dir.
void run_stage(Stage stage, const RunConfig& cfg, const StageOptions& options = {});

/// Runs the given stages in order (all of them when empty).
void run_pipeline(const RunConfig& cfg, const std::vector<Stage>& stages = {}, const StageOptions& options = {});

/// Reads summary.json and writes CSV and PNG reports into report/.
/// Returns the written files.
std::vector<std::filesystem::path> emit_report(const std::filesystem::path& run_dir);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace cafe::exp
