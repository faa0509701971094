#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "cafe/checkpoint.hpp"
#include "cafe/experiment.hpp"
#include "cafe/feature_viz.hpp"
#include "cafe/iv_core.hpp"

using namespace cafe;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::string output_dir;
    std::optional<std::uint64_t> seed;
    bool force = false;
    bool quiet = false;

    void attach(CLI::App* app, bool stage_flags = true) {
        app->add_option("-c,--config", config, "JSON run config (defaults apply when omitted)");
        app->add_option("-o,--output-dir", output_dir, "Run directory, overrides output_dir in the config");
        app->add_option("-s,--seed", seed, "Master seed, overrides the config");
        if (stage_flags) {
            app->add_flag("-f,--force", force, "Redo a stage that already completed");
            app->add_flag("-q,--quiet", quiet, "No progress output");
        }
    }

    exp::RunConfig resolve() const {
        exp::RunConfig cfg = config.empty() ? exp::RunConfig{} : exp::load_config(config);
        if (!output_dir.empty()) cfg.output_dir = output_dir;
        if (seed) cfg.seed = *seed;
        cfg.validate();
        return cfg;
    }
    exp::StageOptions options() const { return {force, quiet}; }
};

struct Loaded {
    exp::RunConfig cfg;
    exp::RunLayout layout;
    data::Dataset ds;
    zoo::SplitClassifier<float> model;
};

Loaded load_run(const Common& c) {
    auto cfg = c.resolve();
    exp::RunLayout layout{cfg.output_dir};
    if (!layout.completed(exp::Stage::Pretrain))
        throw exp::ExperimentError("no pretrain stage in " + layout.root.string() + "; run `cafe pretrain` first");
    auto model = ckpt::load_classifier(layout.classifier(), cfg.model);
    auto ds = data::load_dataset(cfg.dataset);
    return {cfg, layout, std::move(ds), std::move(model)};
}

void need_amr(const exp::RunLayout& layout) {
    if (!layout.completed(exp::Stage::FitAmr))
        throw exp::ExperimentError("no fit-amr stage in " + layout.root.string() + "; run `cafe fit-amr-gmm` first");
}

void print(const json& j) { std::cout << j.dump(2) << std::endl; }

Tensor<float> row(const Tensor<float>& t, int i) {
    Shape s = t.shape();
    s.erase(s.begin());
    Tensor<float> out(s);
    std::copy_n(t.data() + i * t.row_size(), t.row_size(), out.data());
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Causal feature analysis and CAFE adversarial training"};
    app.require_subcommand(1);

    Common common;
    std::vector<std::string> stage_names;

    auto add_stage_verb = [&](const std::string& verb, exp::Stage stage, const std::string& help) {
        auto* sub = app.add_subcommand(verb, help);
        common.attach(sub);
        sub->callback([&, stage] { exp::run_stage(stage, common.resolve(), common.options()); });
    };
    add_stage_verb("pretrain", exp::Stage::Pretrain, "Adversarially train the classifier f0");
    add_stage_verb("fit-amr-gmm", exp::Stage::FitAmr, "Fit the hypothesis h and test function g on f0");
    add_stage_verb("invert", exp::Stage::Invert, "Build the causal-inversion archive for the training set");
    add_stage_verb("train", exp::Stage::TrainCafe, "Train baseline and CAFE defenses");
    add_stage_verb("evaluate", exp::Stage::Evaluate, "Robustness, conjunctions, diagnostics and defense evaluation");
    add_stage_verb("ablate-regularizer", exp::Stage::Ablate, "Sweep the AMR regularizer weight");

    auto* run = app.add_subcommand("run", "Run pipeline stages in order");
    common.attach(run);
    run->add_option("--stages", stage_names, "Stages to run (default: all)");
    run->callback([&] {
        std::vector<exp::Stage> stages;
        for (const auto& s : stage_names) stages.push_back(exp::parse_stage(s));
        exp::run_pipeline(common.resolve(), stages, common.options());
    });

    auto* report = app.add_subcommand("report", "Write CSV and PNG reports for a run directory");
    std::string report_dir;
    report->add_option("run_dir", report_dir, "Run directory")->required();
    report->callback([&] {
        for (const auto& f : exp::emit_report(report_dir)) std::cout << f.string() << '\n';
    });

    auto* show = app.add_subcommand("config", "Print the resolved config as JSON");
    common.attach(show, false);
    show->callback([&] { print(exp::to_json(common.resolve())); });

    auto* atk = app.add_subcommand("attack", "Attack the test set with the pretrained classifier");
    common.attach(atk, false);
    std::string attack_kind = "pgd";
    std::string eps_text;
    std::string attack_png;
    int attack_show = 8;
    atk->add_option("-a,--attack", attack_kind, "fgsm, pgd or cw")->check(CLI::IsMember({"fgsm", "pgd", "cw"}));
    atk->add_option("--eps", eps_text, "L-infinity radius, e.g. 8/255");
    atk->add_option("--png", attack_png, "Write natural and adversarial images side by side");
    atk->add_option("--show", attack_show, "Samples in the image");
    atk->callback([&] {
        auto r = load_run(common);
        if (!eps_text.empty()) {
            const double eps = attack::parse_eps(eps_text);
            const double scale = eps / r.cfg.attack.eps;
            r.cfg.attack.eps = eps;
            r.cfg.attack.train_step_size *= scale;
            r.cfg.attack.eval_step_size *= scale;
        }
        const auto spec = r.cfg.attack.eval_spec(attack_kind);
        const auto seed = derive_seed(r.cfg.seed, "evaluate");
        const auto xa = attack::attack_dataset(r.model, r.ds.test, spec, seed, r.cfg.evaluate.chunk);
        const auto nat = attack::predict(r.model, r.ds.test.images, r.cfg.evaluate.chunk);
        const auto adv = attack::predict(r.model, xa, r.cfg.evaluate.chunk);
        print({{"attack", attack_kind},
               {"eps", spec.budget.eps_max},
               {"natural_acc", attack::accuracy_percent(nat, r.ds.test.labels)},
               {"attacked_acc", attack::accuracy_percent(adv, r.ds.test.labels)},
               {"violations", attack::count_violations(r.ds.test.images, xa, spec.budget.eps_max)}});
        if (!attack_png.empty()) {
            viz::PanelColumn a{"natural", {}}, b{attack_kind, {}};
            for (int i = 0; i < std::min(attack_show, r.ds.test.size()); ++i) {
                a.images.push_back(row(r.ds.test.images, i));
                b.images.push_back(row(xa, i));
            }
            viz::render_panel({a, b}, attack_png);
        }
    });

    auto* conj = app.add_subcommand("eval-conjunctions", "Adv/CF/CC/AC accuracies of the fitted h and g");
    common.attach(conj, false);
    conj->callback([&] {
        auto r = load_run(common);
        need_amr(r.layout);
        auto h = ckpt::load_feature_net(r.layout.hypothesis(), "hypothesis");
        auto g = ckpt::load_feature_net(r.layout.test_function(), "test_function");
        std::vector<attack::AttackSpec> specs;
        for (const auto& k : r.cfg.evaluate.attacks) specs.push_back(r.cfg.attack.eval_spec(k));
        const auto t = analysis::conjunction_robustness(r.model, h, g, r.ds.test, specs, derive_seed(r.cfg.seed, "evaluate"),
                                                        r.cfg.evaluate.chunk);
        json out{{"natural", t.natural}};
        for (const auto& [k, a] : t.by_attack) out[k] = {{"Adv", a.adv}, {"CF", a.cf}, {"CC", a.cc}, {"AC", a.ac}};
        print(out);
    });

    auto* diag = app.add_subcommand("diagnose-iv", "Instrument diagnostics acc_T, acc_Z and rho");
    common.attach(diag, false);
    diag->callback([&] {
        auto r = load_run(common);
        const auto d = analysis::iv_diagnostics(r.model, r.ds.test, r.cfg.attack.eval_spec("pgd"), derive_seed(r.cfg.seed, "evaluate"),
                                                r.cfg.evaluate.pearson, r.cfg.evaluate.chunk);
        print({{"acc_T", d.acc_T}, {"acc_Z", d.acc_Z}, {"rho", d.pearson_rho}, {"chance", 100.0 / r.cfg.dataset.num_classes}});
    });

    auto* vis = app.add_subcommand("visualize", "Feature inversions of natural, adversarial and conjunction features");
    common.attach(vis, false);
    std::string vis_out;
    int vis_n = 6;
    int vis_steps = 200;
    vis->add_option("--out", vis_out, "PNG path (default: <run>/report/features.png)");
    vis->add_option("-n,--samples", vis_n, "Test samples to show")->check(CLI::Range(1, 64));
    vis->add_option("--steps", vis_steps, "Inversion steps")->check(CLI::PositiveNumber);
    vis->callback([&] {
        auto r = load_run(common);
        need_amr(r.layout);
        auto h = ckpt::load_feature_net(r.layout.hypothesis(), "hypothesis");
        auto g = ckpt::load_feature_net(r.layout.test_function(), "test_function");
        const auto d = r.ds.test.slice(0, std::min(vis_n, r.ds.test.size()));
        const auto seed = derive_seed(r.cfg.seed, "visualize");
        const auto xa = attack::attack_dataset(r.model, d, r.cfg.attack.eval_spec("pgd"), seed);
        const auto c = analysis::conjunction_features(r.model, h, g, d.images, xa);
        viz::VizConfig vc;
        vc.steps = vis_steps;
        vc.seed = seed;
        std::vector<viz::PanelColumn> cols{{"natural", {}}, {"adversarial", {}}};
        for (int i = 0; i < d.size(); ++i) {
            cols[0].images.push_back(row(d.images, i));
            cols[1].images.push_back(row(xa, i));
        }
        for (const auto& [title, target] : std::vector<std::pair<std::string, const Tensor<float>*>>{
                 {"f(x)", &c.f_nat}, {"f(x_adv)", &c.adv}, {"AC", &c.ac}, {"CF", &c.cf}}) {
            const auto res = viz::invert_feature(r.model, *target, vc);
            viz::PanelColumn col{title, {}};
            for (int i = 0; i < d.size(); ++i) col.images.push_back(row(res.images, i));
            cols.push_back(std::move(col));
        }
        const fs::path out = vis_out.empty() ? r.layout.report_dir() / "features.png" : fs::path(vis_out);
        if (out.has_parent_path()) fs::create_directories(out.parent_path());
        viz::render_panel(cols, out);
        std::cout << out.string() << '\n';
    });

    auto* synth = app.add_subcommand("synth-iv", "OLS, 2SLS and minimax GMM on the linear confounded model");
    iv::DgpParams dgp;
    int synth_n = 100000;
    std::uint64_t synth_seed = 0;
    iv::GmmConfig gmm;
    synth->add_option("-n", synth_n, "Samples")->check(CLI::PositiveNumber);
    synth->add_option("--seed", synth_seed, "Seed");
    synth->add_option("--alpha", dgp.alpha, "Instrument strength");
    synth->add_option("--beta", dgp.beta, "Confounder effect on the treatment");
    synth->add_option("--theta", dgp.theta, "True causal slope");
    synth->add_option("--gamma", dgp.gamma, "Confounder effect on the outcome");
    synth->add_option("--sigma", dgp.sigma, "Outcome noise");
    synth->add_option("--lambda", gmm.lambda, "Test-function regularizer");
    synth->add_option("--steps", gmm.steps, "Alternating steps");
    synth->callback([&] {
        const auto ds = iv::simulate_linear_dgp(dgp, synth_n, synth_seed);
        gmm.seed = derive_seed(synth_seed, "gmm");
        const auto fit = iv::gmm_minimax_fit(ds, iv::FunctionClass::Linear, iv::FunctionClass::Linear, gmm);
        print({{"theta", dgp.theta}, {"ols", iv::ols_fit(ds)}, {"two_stage_ls", iv::twosls_fit(ds)}, {"gmm", fit.h.slope()}});
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
