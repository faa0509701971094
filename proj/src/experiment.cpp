#include "cafe/experiment.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <optional>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "cafe/checkpoint.hpp"
#include "cafe/plots.hpp"

namespace cafe::exp {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- config

attack::AttackSpec AttackConfig::train_spec() const {
    attack::AttackSpec s = attack::AttackSpec::named("pgd", eps);
    s.budget = train_budget();
    return s;
}

attack::AttackSpec AttackConfig::eval_spec(const std::string& kind) const {
    attack::AttackSpec s = attack::AttackSpec::named(kind, eps);
    if (kind == "pgd") s.budget = {eps, eval_steps, eval_step_size, true};
    if (kind == "cw") {
        s.iters = cw_iters;
        s.kappa = kappa;
    }
    return s;
}

RunConfig::RunConfig() {
    dataset.train_size = 1000;
    dataset.test_size = 300;
    model.num_classes = dataset.num_classes;
    pretrain.optim.epochs = 12;
    pretrain.optim.batch_size = 64;
    pretrain.optim.lr_max = 0.1;
    amr.lambda_reg = 0.1;
    defense.optim.epochs = 12;
    defense.optim.batch_size = 64;
    defense.optim.lr_max = 0.05;
}

void RunConfig::validate() const {
    if (dataset.num_classes < 2) throw ConfigError("dataset.num_classes must be at least 2");
    if (model.num_classes != dataset.num_classes) throw ConfigError("model and dataset disagree on the class count");
    attack.train_budget().validate();
    attack::PerturbationBudget{attack.eps, attack.eval_steps, attack.eval_step_size, true}.validate();
    if (attack.cw_iters < 1) throw ConfigError("attack.cw_iters must be at least 1");
    if (attack.kappa < 0) throw ConfigError("attack.kappa must be non-negative");
    amr.validate();
    inversion.validate();
    if (ablation.rademacher_draws < 100 || evaluate.rademacher_draws < 100)
        throw ConfigError("rademacher_draws must be at least 100");
    if (defense.kinds.empty()) throw ConfigError("defense.kinds must not be empty");
    if (defense.seeds.empty()) throw ConfigError("defense.seeds must not be empty");
    std::set<std::uint64_t> seen(defense.seeds.begin(), defense.seeds.end());
    if (seen.size() != defense.seeds.size()) throw ConfigError("defense.seeds must be distinct");
    for (const auto& a : evaluate.attacks)
        if (a != "fgsm" && a != "pgd" && a != "cw") throw ConfigError("evaluate.attacks: unsupported attack '" + a + "'");
    if (evaluate.chunk < 1) throw ConfigError("evaluate.chunk must be positive");
    defense::DefenseConfig probe;
    probe.optim = pretrain.optim;
    probe.attack_warmup_epochs = pretrain.attack_warmup_epochs;
    try {
        probe.validate();
        probe.optim = defense.optim;
        probe.trades_beta = defense.trades_beta;
        probe.cafe_weight = defense.cafe_weight;
        probe.attack_warmup_epochs = defense.attack_warmup_epochs;
        probe.validate();
    } catch (const defense::DefenseError& e) {
        throw ConfigError(e.what());
    }
}

namespace {

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f%%", v);
    return buf;
}

std::string short_number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string format_number(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

// Strict view of one JSON object: every key must be consumed before finish().
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError("config key '" + where(key) + "': " + e.what());
        }
    }

    void get_eps(const std::string& key, double& out) {
        if (!j_.contains(key)) return;
        used_.insert(key);
        const auto& v = j_.at(key);
        try {
            if (v.is_string())
                out = attack::parse_eps(v.get<std::string>());
            else
                out = v.get<double>();
        } catch (const std::exception& e) {
            throw ConfigError("config key '" + where(key) + "': " + e.what());
        }
    }

    template <class E, class Parse>
    void get_enum(const std::string& key, E& out, Parse parse) {
        if (!j_.contains(key)) return;
        std::string s;
        get(key, s);
        try {
            out = parse(s);
        } catch (const std::exception& e) {
            throw ConfigError("config key '" + where(key) + "': " + e.what());
        }
    }

    std::optional<Section> child(const std::string& key) {
        if (!j_.contains(key)) return std::nullopt;
        used_.insert(key);
        return Section(j_.at(key), where(key));
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!used_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
    }

private:
    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

json optim_json(const defense::OptimizerConfig& o) {
    return {{"momentum", o.momentum}, {"lr_max", o.lr_max},         {"weight_decay", o.weight_decay},
            {"schedule", o.schedule}, {"epochs", o.epochs},         {"batch_size", o.batch_size}};
}

void read_optim(Section& s, defense::OptimizerConfig& o) {
    s.get("momentum", o.momentum);
    s.get("lr_max", o.lr_max);
    s.get("weight_decay", o.weight_decay);
    s.get("schedule", o.schedule);
    s.get("epochs", o.epochs);
    s.get("batch_size", o.batch_size);
}

}  // namespace

json to_json(const RunConfig& c) {
    json kinds = json::array();
    for (auto k : c.defense.kinds) kinds.push_back(defense::to_string(k));
    return {
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"dataset",
         {{"name", c.dataset.name},
          {"root", c.dataset.root},
          {"num_classes", c.dataset.num_classes},
          {"train_size", c.dataset.train_size},
          {"test_size", c.dataset.test_size},
          {"seed", c.dataset.seed},
          {"normalization", c.dataset.normalization},
          {"verify_checksums", c.dataset.verify_checksums}}},
        {"model", {{"arch", c.model.name}, {"split", c.model.split}}},
        {"attack",
         {{"eps", c.attack.eps},
          {"train_steps", c.attack.train_steps},
          {"train_step_size", c.attack.train_step_size},
          {"eval_steps", c.attack.eval_steps},
          {"eval_step_size", c.attack.eval_step_size},
          {"cw_iters", c.attack.cw_iters},
          {"kappa", c.attack.kappa}}},
        {"pretrain", {{"optimizer", optim_json(c.pretrain.optim)}, {"attack_warmup_epochs", c.pretrain.attack_warmup_epochs}}},
        {"amr",
         {{"lambda_reg", c.amr.lambda_reg},
          {"lr_h", c.amr.lr_h},
          {"lr_g", c.amr.lr_g},
          {"g_steps", c.amr.g_steps},
          {"h_steps", c.amr.h_steps},
          {"epochs", c.amr.epochs},
          {"batch_size", c.amr.batch_size},
          {"sign_convention", amr::to_string(c.amr.sign)},
          {"net", zoo::to_string(c.amr.net_kind)}}},
        {"ablation", {{"lambdas", c.ablation.lambdas}, {"rademacher_draws", c.ablation.rademacher_draws}}},
        {"inversion",
         {{"gamma", c.inversion.gamma},
          {"steps", c.inversion.steps},
          {"step_size", c.inversion.step_size},
          {"early_stop_kl", c.inversion.early_stop_kl},
          {"smoothing", c.inversion.smoothing},
          {"adversarial_init", c.inversion.adversarial_init}}},
        {"defense",
         {{"kinds", kinds},
          {"seeds", c.defense.seeds},
          {"trades_beta", c.defense.trades_beta},
          {"cafe_weight", c.defense.cafe_weight},
          {"cafe_target", defense::to_string(c.defense.cafe_target)},
          {"refresh_inversions", c.defense.refresh_inversions},
          {"optimizer", optim_json(c.defense.optim)},
          {"attack_warmup_epochs", c.defense.attack_warmup_epochs}}},
        {"evaluate",
         {{"attacks", c.evaluate.attacks},
          {"pearson", c.evaluate.pearson == analysis::PearsonMode::PerSample ? "per-sample" : "global"},
          {"rademacher_draws", c.evaluate.rademacher_draws},
          {"chunk", c.evaluate.chunk}}},
    };
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    Section root(j, "");
    root.get("seed", c.seed);
    root.get("output_dir", c.output_dir);
    if (auto s = root.child("dataset")) {
        s->get("name", c.dataset.name);
        s->get("root", c.dataset.root);
        s->get("num_classes", c.dataset.num_classes);
        s->get("train_size", c.dataset.train_size);
        s->get("test_size", c.dataset.test_size);
        s->get("seed", c.dataset.seed);
        s->get("normalization", c.dataset.normalization);
        s->get("verify_checksums", c.dataset.verify_checksums);
        s->finish();
    }
    if (auto s = root.child("model")) {
        s->get("arch", c.model.name);
        s->get("split", c.model.split);
        s->finish();
    }
    c.model.num_classes = c.dataset.num_classes;
    if (auto s = root.child("attack")) {
        s->get_eps("eps", c.attack.eps);
        s->get("train_steps", c.attack.train_steps);
        s->get("train_step_size", c.attack.train_step_size);
        s->get("eval_steps", c.attack.eval_steps);
        s->get("eval_step_size", c.attack.eval_step_size);
        s->get("cw_iters", c.attack.cw_iters);
        s->get("kappa", c.attack.kappa);
        s->finish();
    }
    c.inversion.gamma = c.attack.eps;
    if (auto s = root.child("pretrain")) {
        if (auto o = s->child("optimizer")) {
            read_optim(*o, c.pretrain.optim);
            o->finish();
        }
        s->get("attack_warmup_epochs", c.pretrain.attack_warmup_epochs);
        s->finish();
    }
    if (auto s = root.child("amr")) {
        s->get("lambda_reg", c.amr.lambda_reg);
        s->get("lr_h", c.amr.lr_h);
        s->get("lr_g", c.amr.lr_g);
        s->get("g_steps", c.amr.g_steps);
        s->get("h_steps", c.amr.h_steps);
        s->get("epochs", c.amr.epochs);
        s->get("batch_size", c.amr.batch_size);
        s->get_enum("sign_convention", c.amr.sign, amr::parse_sign_convention);
        s->get_enum("net", c.amr.net_kind, zoo::parse_feature_net_kind);
        s->finish();
    }
    if (auto s = root.child("ablation")) {
        s->get("lambdas", c.ablation.lambdas);
        s->get("rademacher_draws", c.ablation.rademacher_draws);
        s->finish();
    }
    if (auto s = root.child("inversion")) {
        s->get_eps("gamma", c.inversion.gamma);
        s->get("steps", c.inversion.steps);
        s->get("step_size", c.inversion.step_size);
        s->get("early_stop_kl", c.inversion.early_stop_kl);
        s->get("smoothing", c.inversion.smoothing);
        s->get("adversarial_init", c.inversion.adversarial_init);
        s->finish();
    }
    if (auto s = root.child("defense")) {
        std::vector<std::string> kinds;
        s->get("kinds", kinds);
        if (!kinds.empty()) {
            c.defense.kinds.clear();
            try {
                for (const auto& k : kinds) c.defense.kinds.push_back(defense::parse_defense_kind(k));
            } catch (const std::exception& e) {
                throw ConfigError(std::string("config key 'defense.kinds': ") + e.what());
            }
        }
        s->get("seeds", c.defense.seeds);
        s->get("trades_beta", c.defense.trades_beta);
        s->get("cafe_weight", c.defense.cafe_weight);
        s->get_enum("cafe_target", c.defense.cafe_target, defense::parse_cafe_target);
        s->get("refresh_inversions", c.defense.refresh_inversions);
        if (auto o = s->child("optimizer")) {
            read_optim(*o, c.defense.optim);
            o->finish();
        }
        s->get("attack_warmup_epochs", c.defense.attack_warmup_epochs);
        s->finish();
    }
    if (auto s = root.child("evaluate")) {
        s->get("attacks", c.evaluate.attacks);
        std::string mode;
        s->get("pearson", mode);
        if (mode == "global")
            c.evaluate.pearson = analysis::PearsonMode::Global;
        else if (!mode.empty() && mode != "per-sample")
            throw ConfigError("config key 'evaluate.pearson' must be per-sample or global");
        s->get("rademacher_draws", c.evaluate.rademacher_draws);
        s->get("chunk", c.evaluate.chunk);
        s->finish();
    }
    root.finish();
    try {
        c.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    return c;
}

json read_json(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ExperimentError("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("cannot parse " + path.string() + ": " + e.what());
    }
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream out(path);
    if (!out) throw ExperimentError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

RunConfig load_config(const fs::path& path) {
    if (!fs::exists(path)) throw ConfigError("config file " + path.string() + " does not exist");
    return config_from_json(read_json(path));
}

namespace {

// The config minus its location, so a copied run directory keeps its identity.
json portable(json j) {
    j.erase("output_dir");
    return j;
}

}  // namespace

std::string run_id(const RunConfig& cfg) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(portable(to_json(cfg)).dump())));
    return buf;
}

// ---------------------------------------------------------------- stages

std::string to_string(Stage s) {
    switch (s) {
        case Stage::Pretrain: return "pretrain";
        case Stage::FitAmr: return "fit-amr";
        case Stage::Invert: return "invert";
        case Stage::TrainCafe: return "train-cafe";
        case Stage::Evaluate: return "evaluate";
        case Stage::Ablate: return "ablate";
    }
    return "?";
}

Stage parse_stage(const std::string& s) {
    for (Stage st : all_stages())
        if (to_string(st) == s) return st;
    throw ExperimentError("unknown stage '" + s + "'");
}

const std::vector<Stage>& all_stages() {
    static const std::vector<Stage> v{Stage::Pretrain, Stage::FitAmr,   Stage::Invert,
                                      Stage::TrainCafe, Stage::Evaluate, Stage::Ablate};
    return v;
}

json MetricsRecord::to_json() const {
    return {{"run", run}, {"stage", stage}, {"step", step}, {"tag", tag}, {"metrics", metrics}};
}

MetricsWriter::MetricsWriter(fs::path path, std::string run, std::string stage)
    : path_(std::move(path)), run_(std::move(run)), stage_(std::move(stage)) {}

void MetricsWriter::write(const std::string& tag, json metrics) {
    MetricsRecord r{run_, stage_, step_++, tag, std::move(metrics)};
    std::ofstream out(path_, std::ios::app);
    if (!out) throw ExperimentError("cannot append to " + path_.string());
    out << r.to_json().dump() << '\n';
}

namespace {

using Clock = std::chrono::steady_clock;

struct StageContext {
    const RunConfig& cfg;
    RunLayout layout;
    std::string run;
    Stage stage;
    fs::path dir;
    MetricsWriter metrics;
    bool quiet;

    void log(const std::string& msg) const {
        if (!quiet) std::cerr << "[" << to_string(stage) << "] " << msg << std::endl;
    }
    void timing(const std::string& item, double seconds) const {
        std::ofstream out(layout.timing(), std::ios::app);
        out << json{{"stage", to_string(stage)}, {"item", item}, {"seconds", seconds}}.dump() << '\n';
    }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void require(const RunLayout& layout, Stage needed, Stage by) {
    if (!layout.completed(needed))
        throw ExperimentError("stage '" + to_string(by) + "' needs the '" + to_string(needed) + "' stage; " +
                              (layout.stage_dir(needed) / "summary.json").string() + " is missing");
}

json epoch_json(const defense::DefenseEpochRecord& r) {
    json j{{"epoch", r.epoch},
           {"learning_rate", r.learning_rate},
           {"loss_defense", r.loss_defense},
           {"loss_cafe", r.loss_cafe},
           {"loss_total", r.loss_total}};
    if (r.natural_acc) j["natural_acc"] = *r.natural_acc;
    if (r.robust_acc) j["pgd_acc"] = *r.robust_acc;
    return j;
}

json amr_epoch_json(const amr::AmrEpochRecord& r) {
    return {{"epoch", r.epoch},   {"moment", r.moment}, {"regularizer", r.regularizer}, {"acc_adv", r.acc_adv},
            {"acc_cf", r.acc_cf}, {"acc_cc", r.acc_cc}, {"acc_ac", r.acc_ac}};
}

json summary_json(const analysis::DistributionSummary& s) {
    return {{"mean", s.mean}, {"median", s.median}, {"q1", s.q1}, {"q3", s.q3}, {"min", s.min}, {"max", s.max}};
}

json conjunction_json(const analysis::ConjunctionAccuracy& a) {
    return {{"adv", a.adv}, {"cf", a.cf}, {"cc", a.cc}, {"ac", a.ac}};
}

json robustness_json(const attack::RobustnessTable& t) {
    json j{{"natural", t.natural}, {"violations", t.violations}};
    for (const auto& [k, v] : t.attacked) j[k] = v;
    return j;
}

std::vector<attack::AttackSpec> eval_specs(const RunConfig& cfg) {
    std::vector<attack::AttackSpec> v;
    for (const auto& k : cfg.evaluate.attacks) v.push_back(cfg.attack.eval_spec(k));
    return v;
}

amr::AmrFitConfig amr_config(const RunConfig& cfg, double lambda) {
    auto a = cfg.amr;
    a.attack = cfg.attack.train_budget();
    a.seed = derive_seed(cfg.seed, "fit-amr");
    a.lambda_reg = lambda;
    return a;
}

// Split-layer instruments z = f(x_adv) - f(x), chunkwise.
Tensor<float> instruments(zoo::SplitClassifier<float>& model, const Tensor<float>& x, const Tensor<float>& x_adv, int chunk) {
    const int n = x.dim(0);
    Shape shape = model.feature_shape();
    shape.insert(shape.begin(), n);
    Tensor<float> z(shape);
    const auto rs = x.row_size();
    const auto fs_ = z.row_size();
    for (int b = 0; b < n; b += chunk) {
        const int e = std::min(n, b + chunk);
        Shape s = x.shape();
        s[0] = e - b;
        Tensor<float> xs(s), xa(s);
        std::copy_n(x.data() + b * rs, (e - b) * rs, xs.data());
        std::copy_n(x_adv.data() + b * rs, (e - b) * rs, xa.data());
        const auto batch = amr::compute_instrument(model, xs, xa, std::vector<int>(static_cast<std::size_t>(e - b), 0));
        std::copy_n(batch.z.data(), batch.z.size(), z.data() + b * fs_);
    }
    return z;
}

std::string defense_tag(defense::DefenseKind kind, const std::string& variant, std::uint64_t seed) {
    return defense::to_string(kind) + "/" + variant + "/seed" + std::to_string(seed);
}

json run_pretrain(StageContext& ctx, const data::Dataset& ds) {
    const auto& cfg = ctx.cfg;
    defense::DefenseConfig dc;
    dc.kind = defense::DefenseKind::Adv;
    dc.cafe_weight = 0;
    dc.cafe_target = defense::CafeTarget::Off;
    dc.attack = cfg.attack.train_budget();
    dc.optim = cfg.pretrain.optim;
    dc.attack_warmup_epochs = cfg.pretrain.attack_warmup_epochs;
    dc.seed = derive_seed(cfg.seed, "pretrain");
    dc.eval_attack = cfg.attack.eval_spec("pgd");
    dc.eval_every = std::max(1, dc.optim.epochs / 4);
    auto r = defense::train_cafe(zoo::SplitClassifier<float>(cfg.model, derive_seed(cfg.seed, "pretrain-init")), ds.train,
                                 ds.test, dc);
    for (const auto& e : r.trace) ctx.metrics.write("classifier", epoch_json(e));
    ckpt::save_classifier(r.model, ctx.dir / "classifier.ckpt", {{"stage", "pretrain"}, {"run", ctx.run}});
    const auto& last = r.trace.back();
    ctx.log("natural " + pct(*last.natural_acc) + ", pgd " + pct(*last.robust_acc));
    return {{"epochs", dc.optim.epochs}, {"natural_acc", *last.natural_acc}, {"pgd_acc", *last.robust_acc}};
}

json run_fit_amr(StageContext& ctx, const data::Dataset& ds) {
    require(ctx.layout, Stage::Pretrain, Stage::FitAmr);
    auto f0 = ckpt::load_classifier(ctx.layout.classifier(), ctx.cfg.model);
    auto fit = amr::fit_amr_gmm(f0, ds.train, amr_config(ctx.cfg, ctx.cfg.amr.lambda_reg));
    for (const auto& e : fit.trace) ctx.metrics.write("amr", amr_epoch_json(e));
    ckpt::save_feature_net(fit.h, "hypothesis", ctx.layout.hypothesis(), {{"lambda_reg", ctx.cfg.amr.lambda_reg}});
    ckpt::save_feature_net(fit.g, "test_function", ctx.layout.test_function(), {{"lambda_reg", ctx.cfg.amr.lambda_reg}});
    for (const auto& w : fit.warnings) ctx.log("warning: " + w);
    json s = amr_epoch_json(fit.trace.back());
    s["lambda_reg"] = ctx.cfg.amr.lambda_reg;
    s["warnings"] = fit.warnings;
    return s;
}

json run_invert(StageContext& ctx, const data::Dataset& ds) {
    require(ctx.layout, Stage::FitAmr, Stage::Invert);
    auto f0 = ckpt::load_classifier(ctx.layout.classifier(), ctx.cfg.model);
    auto h = ckpt::load_feature_net(ctx.layout.hypothesis(), "hypothesis");
    const auto archive = inversion::build_archive(f0, h, ds.train, ctx.cfg.attack.train_spec(), ctx.cfg.inversion,
                                                  derive_seed(ctx.cfg.seed, "invert"), ctx.cfg.evaluate.chunk);
    archive.save(ctx.layout.inversions());
    const auto k0 = analysis::summarize(archive.kl_initial());
    const auto k1 = analysis::summarize(archive.kl_final());
    const long violations = attack::count_violations(ds.train.images, archive.x_causal(), ctx.cfg.inversion.gamma);
    json s{{"samples", archive.size()}, {"kl_initial", summary_json(k0)}, {"kl_final", summary_json(k1)}, {"violations", violations}};
    ctx.metrics.write("inversion", s);
    ctx.log("mean KL " + short_number(k0.mean) + " -> " + short_number(k1.mean));
    return s;
}

json run_train_cafe(StageContext& ctx, const data::Dataset& ds) {
    const auto& cfg = ctx.cfg;
    const auto& dcfg = cfg.defense;
    const bool cafe = dcfg.cafe_weight > 0 && dcfg.cafe_target != defense::CafeTarget::Off;
    std::optional<inversion::InversionArchive> archive;
    std::optional<zoo::FeatureNet<float>> h;
    if (cafe) {
        require(ctx.layout, Stage::Invert, Stage::TrainCafe);
        archive = inversion::InversionArchive::load(ctx.layout.inversions());
        if (dcfg.refresh_inversions) h = ckpt::load_feature_net(ctx.layout.hypothesis(), "hypothesis");
    }
    fs::create_directories(ctx.dir / "models");
    json runs = json::array();
    json means = json::object();
    for (auto kind : dcfg.kinds) {
        std::vector<std::string> variants{"baseline"};
        if (cafe) variants.push_back("cafe");
        for (const auto& variant : variants) {
            double nat = 0, rob = 0;
            for (auto s : dcfg.seeds) {
                defense::DefenseConfig dc;
                dc.kind = kind;
                dc.trades_beta = dcfg.trades_beta;
                dc.cafe_weight = variant == "cafe" ? dcfg.cafe_weight : 0.0;
                dc.cafe_target = variant == "cafe" ? dcfg.cafe_target : defense::CafeTarget::Off;
                dc.refresh_inversions = dcfg.refresh_inversions;
                dc.attack = cfg.attack.train_budget();
                dc.optim = dcfg.optim;
                dc.attack_warmup_epochs = dcfg.attack_warmup_epochs;
                dc.seed = derive_seed(cfg.seed, "defense", s);
                dc.eval_attack = cfg.attack.eval_spec("pgd");
                dc.eval_every = std::max(1, dc.optim.epochs / 4);
                defense::CausalSource src;
                if (archive) src.archive = &*archive;
                if (h) src.hypothesis = &*h;
                src.inversion = cfg.inversion;
                const auto t0 = Clock::now();
                auto r = defense::train_cafe(zoo::SplitClassifier<float>(cfg.model, derive_seed(cfg.seed, "defense-init", s)),
                                             ds.train, ds.test, dc, src);
                const std::string tag = defense_tag(kind, variant, s);
                ctx.timing(tag, seconds_since(t0));
                for (const auto& e : r.trace) ctx.metrics.write(tag, epoch_json(e));
                const std::string file = defense::to_string(kind) + "_" + variant + "_seed" + std::to_string(s) + ".ckpt";
                ckpt::save_classifier(r.model, ctx.dir / "models" / file, {{"tag", tag}});
                const auto& last = r.trace.back();
                nat += *last.natural_acc;
                rob += *last.robust_acc;
                runs.push_back({{"kind", defense::to_string(kind)},
                                {"variant", variant},
                                {"seed", s},
                                {"natural_acc", *last.natural_acc},
                                {"pgd_acc", *last.robust_acc},
                                {"checkpoint", "models/" + file}});
                ctx.log(tag + ": natural " + pct(*last.natural_acc) + ", pgd " + pct(*last.robust_acc));
            }
            const double n = static_cast<double>(dcfg.seeds.size());
            means[defense::to_string(kind)][variant] = {{"natural_acc", nat / n}, {"pgd_acc", rob / n}};
        }
        if (cafe) {
            auto& m = means[defense::to_string(kind)];
            m["delta_pgd"] = m["cafe"]["pgd_acc"].get<double>() - m["baseline"]["pgd_acc"].get<double>();
            m["delta_natural"] = m["cafe"]["natural_acc"].get<double>() - m["baseline"]["natural_acc"].get<double>();
        }
    }
    return {{"runs", runs}, {"means", means}, {"seeds", dcfg.seeds}, {"cafe_weight", dcfg.cafe_weight},
            {"cafe_target", defense::to_string(dcfg.cafe_target)}};
}

// Each attack is run once per model and shared by every analysis below.
std::map<std::string, Tensor<float>> attack_all(zoo::SplitClassifier<float>& model, const data::ImageBatch& ds,
                                                const std::vector<attack::AttackSpec>& specs, std::uint64_t seed, int chunk) {
    std::map<std::string, Tensor<float>> out;
    for (const auto& spec : specs) out[spec.kind] = attack::attack_dataset(model, ds, spec, seed, chunk);
    return out;
}

json robustness_of(zoo::SplitClassifier<float>& model, const data::ImageBatch& ds, const std::map<std::string, Tensor<float>>& adversarial,
                   double eps, int chunk, long& violations) {
    json j{{"natural", attack::accuracy_percent(attack::predict(model, ds.images, chunk), ds.labels)}};
    long v = 0;
    for (const auto& [kind, adv] : adversarial) {
        v += attack::count_violations(ds.images, adv, eps);
        j[kind] = attack::accuracy_percent(attack::predict(model, adv, chunk), ds.labels);
    }
    j["violations"] = v;
    violations += v;
    return j;
}

json run_evaluate(StageContext& ctx, const data::Dataset& ds) {
    const auto& cfg = ctx.cfg;
    require(ctx.layout, Stage::Pretrain, Stage::Evaluate);
    auto f0 = ckpt::load_classifier(ctx.layout.classifier(), cfg.model);
    const auto seed = derive_seed(cfg.seed, "evaluate");
    const int chunk = cfg.evaluate.chunk;
    const double eps = cfg.attack.eps;
    long violations = 0;
    json s;

    auto specs = eval_specs(cfg);
    const auto adversarial = attack_all(f0, ds.test, specs, seed, chunk);
    const Tensor<float> pgd_adv =
        adversarial.count("pgd") ? adversarial.at("pgd") : attack::attack_dataset(f0, ds.test, cfg.attack.eval_spec("pgd"), seed, chunk);
    if (!adversarial.count("pgd")) violations += attack::count_violations(ds.test.images, pgd_adv, eps);

    s["robustness"] = robustness_of(f0, ds.test, adversarial, eps, chunk, violations);
    ctx.metrics.write("robustness", s["robustness"]);

    const auto diag = analysis::iv_diagnostics(f0, ds.test, pgd_adv, cfg.evaluate.pearson, chunk);
    s["diagnostics"] = {{"acc_T", diag.acc_T},
                        {"acc_Z", diag.acc_Z},
                        {"rho", diag.pearson_rho},
                        {"pearson", diag.mode == analysis::PearsonMode::PerSample ? "per-sample" : "global"},
                        {"chance", 100.0 / cfg.dataset.num_classes}};
    ctx.metrics.write("diagnostics", s["diagnostics"]);

    if (ctx.layout.completed(Stage::FitAmr)) {
        auto h = ckpt::load_feature_net(ctx.layout.hypothesis(), "hypothesis");
        auto g = ckpt::load_feature_net(ctx.layout.test_function(), "test_function");
        const auto table = analysis::conjunction_robustness(f0, h, g, ds.test, adversarial, chunk);
        json conj{{"natural", table.natural}};
        for (const auto& [k, a] : table.by_attack) conj[k] = conjunction_json(a);
        s["conjunctions"] = conj;
        ctx.metrics.write("conjunctions", conj);

        const auto archive = inversion::build_archive(f0, h, ds.test, pgd_adv, cfg.inversion, chunk);
        const long inv_viol = attack::count_violations(ds.test.images, archive.x_causal(), cfg.inversion.gamma);
        violations += inv_viol;
        s["inversion"] = {{"kl_initial", summary_json(analysis::summarize(archive.kl_initial()))},
                          {"kl_final", summary_json(analysis::summarize(archive.kl_final()))},
                          {"violations", inv_viol}};
        ctx.metrics.write("inversion", s["inversion"]);

        const auto prof = analysis::confidence_profile(f0, h, ds.test, pgd_adv, &archive, chunk);
        json conf;
        for (const auto& [k, v] : prof.sources) conf[k] = summary_json(v);
        s["confidence"] = conf;
        ctx.metrics.write("confidence", conf);

        const auto z = instruments(f0, ds.test.images, pgd_adv, chunk);
        const auto rad = analysis::rademacher_distance(g, z, cfg.evaluate.rademacher_draws, derive_seed(seed, "rademacher"));
        s["rademacher"] = summary_json(rad.distance);
        s["rademacher"]["excluded_zero_norm"] = rad.excluded_zero_norm;
        ctx.metrics.write("rademacher", s["rademacher"]);
    } else {
        for (const char* k : {"conjunctions", "inversion", "confidence", "rademacher"})
            s[k] = "unavailable: the fit-amr stage has not run";
    }

    if (ctx.layout.completed(Stage::TrainCafe)) {
        const auto trained = read_json(ctx.layout.stage_dir(Stage::TrainCafe) / "summary.json");
        json models = json::array();
        for (const auto& r : trained.at("runs")) {
            auto m = ckpt::load_classifier(ctx.layout.stage_dir(Stage::TrainCafe) / r.at("checkpoint").get<std::string>(), cfg.model);
            json row = robustness_of(m, ds.test, attack_all(m, ds.test, specs, seed, chunk), eps, chunk, violations);
            row["kind"] = r.at("kind");
            row["variant"] = r.at("variant");
            row["seed"] = r.at("seed");
            ctx.metrics.write(defense_tag(defense::parse_defense_kind(r.at("kind")), r.at("variant"), r.at("seed")), row);
            models.push_back(row);
        }
        s["defense"] = models;
    } else {
        s["defense"] = "unavailable: the train-cafe stage has not run";
    }
    s["violations"] = violations;
    return s;
}

json run_ablate(StageContext& ctx, const data::Dataset& ds) {
    const auto& cfg = ctx.cfg;
    require(ctx.layout, Stage::Pretrain, Stage::Ablate);
    auto f0 = ckpt::load_classifier(ctx.layout.classifier(), cfg.model);
    const auto seed = derive_seed(cfg.seed, "ablate");
    const auto pgd = cfg.attack.eval_spec("pgd");
    const auto x_adv = attack::attack_dataset(f0, ds.test, pgd, seed, cfg.evaluate.chunk);
    const auto z = instruments(f0, ds.test.images, x_adv, cfg.evaluate.chunk);
    json points = json::array();
    for (double lambda : cfg.ablation.lambdas) {
        const std::string tag = "lambda=" + format_number(lambda);
        const auto t0 = Clock::now();
        auto fit = amr::fit_amr_gmm(f0, ds.train, amr_config(cfg, lambda));
        ctx.timing(tag, seconds_since(t0));
        for (const auto& e : fit.trace) ctx.metrics.write(tag, amr_epoch_json(e));
        const auto sub = ctx.dir / ("lambda_" + format_number(lambda));
        fs::create_directories(sub);
        ckpt::save_feature_net(fit.h, "hypothesis", sub / "hypothesis.ckpt", {{"lambda_reg", lambda}});
        ckpt::save_feature_net(fit.g, "test_function", sub / "test_function.ckpt", {{"lambda_reg", lambda}});

        const auto rad = analysis::rademacher_distance(fit.g, z, cfg.ablation.rademacher_draws, derive_seed(seed, "rademacher"));
        const auto table = analysis::conjunction_robustness(f0, fit.h, fit.g, ds.test, std::map<std::string, Tensor<float>>{{"pgd", x_adv}}, cfg.evaluate.chunk);
        const double imbalance = analysis::imbalance_ratio(table.cc_predictions.at("pgd"), cfg.dataset.num_classes);
        json p{{"lambda", lambda},
               {"rademacher", summary_json(rad.distance)},
               {"excluded_zero_norm", rad.excluded_zero_norm},
               {"imbalance_ratio", imbalance},
               {"conjunctions_pgd", conjunction_json(table.by_attack.at("pgd"))}};
        ctx.metrics.write(tag, p);
        ctx.log(tag + ": median rademacher " + short_number(rad.distance.median) + ", imbalance " + short_number(imbalance));
        points.push_back(p);
    }
    return {{"points", points}, {"note", "Rademacher distance is a proxy: |mean sigma_i ||g(z_i)||/||z_i|||"}};
}

void rebuild_index(const RunLayout& layout, const std::string& run) {
    json stages = json::object();
    std::ofstream metrics(layout.metrics(), std::ios::trunc);
    for (Stage s : all_stages()) {
        if (!layout.completed(s)) continue;
        stages[to_string(s)] = read_json(layout.stage_dir(s) / "summary.json");
        std::ifstream in(layout.stage_dir(s) / "metrics.jsonl");
        metrics << in.rdbuf();
    }
    write_json(layout.summary(), {{"run", run}, {"stages", stages}});
}

}  // namespace

void run_stage(Stage stage, const RunConfig& cfg, const StageOptions& options) {
    cfg.validate();
    const RunLayout layout{cfg.output_dir};
    fs::create_directories(layout.root);
    const json resolved = to_json(cfg);
    if (fs::exists(layout.resolved_config())) {
        if (portable(read_json(layout.resolved_config())) != portable(resolved))
            throw ExperimentError("run directory " + layout.root.string() +
                                  " was created with a different config; use a fresh output_dir");
    } else {
        write_json(layout.resolved_config(), resolved);
    }
    const auto dir = layout.stage_dir(stage);
    if (fs::exists(dir)) {
        if (!options.force && layout.completed(stage))
            throw ExperimentError("stage '" + to_string(stage) + "' already completed in " + layout.root.string() +
                                  " (use force to redo it)");
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
    const std::string run = run_id(cfg);
    StageContext ctx{cfg, layout, run, stage, dir, MetricsWriter(dir / "metrics.jsonl", run, to_string(stage)), options.quiet};
    const auto t0 = Clock::now();
    ctx.log("starting");
    const auto ds = data::load_dataset(cfg.dataset);
    json summary;
    switch (stage) {
        case Stage::Pretrain: summary = run_pretrain(ctx, ds); break;
        case Stage::FitAmr: summary = run_fit_amr(ctx, ds); break;
        case Stage::Invert: summary = run_invert(ctx, ds); break;
        case Stage::TrainCafe: summary = run_train_cafe(ctx, ds); break;
        case Stage::Evaluate: summary = run_evaluate(ctx, ds); break;
        case Stage::Ablate: summary = run_ablate(ctx, ds); break;
    }
    // summary.json marks completion, so it is written last
    write_json(dir / "summary.json", summary);
    const double secs = seconds_since(t0);
    ctx.timing("total", secs);
    ctx.log("done in " + format_number(std::round(secs * 10) / 10) + " s");
    rebuild_index(layout, run);
}

void run_pipeline(const RunConfig& cfg, const std::vector<Stage>& stages, const StageOptions& options) {
    for (Stage s : stages.empty() ? all_stages() : stages) run_stage(s, cfg, options);
}

// ---------------------------------------------------------------- report

namespace {

std::string cell(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

class CsvFile {
public:
    explicit CsvFile(const fs::path& p) : out_(p), path_(p) {
        if (!out_) throw ExperimentError("cannot write " + p.string());
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << '\n';
    }
    const fs::path& path() const { return path_; }

private:
    std::ofstream out_;
    fs::path path_;
};

viz::BoxStats box_of(const std::string& label, const json& s) {
    return {label, s.at("min"), s.at("q1"), s.at("median"), s.at("q3"), s.at("max")};
}

}  // namespace

std::vector<fs::path> emit_report(const fs::path& run_dir) {
    const RunLayout layout{run_dir};
    if (!fs::exists(layout.summary())) throw ExperimentError("no summary.json in " + run_dir.string() + "; run a stage first");
    const json summary = read_json(layout.summary());
    const json& stages = summary.at("stages");
    if (stages.empty()) throw ExperimentError("summary.json in " + run_dir.string() + " has no stage metrics");
    const auto out = layout.report_dir();
    fs::create_directories(out);
    std::vector<fs::path> files;
    const std::vector<std::string> conj_cols{"adv", "cf", "cc", "ac"};

    if (stages.contains("evaluate")) {
        const json& ev = stages.at("evaluate");
        {
            CsvFile csv(out / "robustness.csv");
            csv.row({"attack", "accuracy"});
            csv.row({"natural", cell(ev.at("robustness").at("natural"))});
            for (const auto& [k, v] : ev.at("robustness").items())
                if (k != "natural" && k != "violations") csv.row({k, cell(v)});
            files.push_back(csv.path());
        }
        {
            const json& d = ev.at("diagnostics");
            CsvFile csv(out / "diagnostics.csv");
            csv.row({"acc_T", "acc_Z", "rho"});
            csv.row({cell(d.at("acc_T")), cell(d.at("acc_Z")), cell(d.at("rho"))});
            files.push_back(csv.path());
            viz::render_table("IV diagnostics (" + d.at("pearson").get<std::string>() + " rho)",
                              {{"acc_T", "acc_Z", "rho", "chance"},
                               {cell(d.at("acc_T")), cell(d.at("acc_Z")), cell(d.at("rho")), cell(d.at("chance"))}})
                .save_png(out / "diagnostics.png");
            files.push_back(out / "diagnostics.png");
        }
        if (ev.at("conjunctions").is_object()) {
            CsvFile csv(out / "conjunctions.csv");
            csv.row({"attack", "Adv", "CF", "CC", "AC"});
            viz::BarChart chart{"Feature conjunctions", "accuracy %", {}, {"Adv", "CF", "CC", "AC"}, {}, 100};
            for (const auto& [k, v] : ev.at("conjunctions").items()) {
                if (!v.is_object()) continue;
                std::vector<double> row;
                for (const auto& c : conj_cols) row.push_back(v.at(c));
                csv.row({k, cell(row[0]), cell(row[1]), cell(row[2]), cell(row[3])});
                chart.groups.push_back(k);
                chart.values.push_back(row);
            }
            files.push_back(csv.path());
            viz::render_bar_chart(chart).save_png(out / "conjunctions.png");
            files.push_back(out / "conjunctions.png");
        }
        if (ev.at("confidence").is_object()) {
            CsvFile csv(out / "confidence.csv");
            csv.row({"source", "mean", "median", "q1", "q3"});
            viz::BoxPlot plot{"True-class confidence", "probability", {}};
            for (const auto& [k, v] : ev.at("confidence").items()) {
                csv.row({k, cell(v.at("mean")), cell(v.at("median")), cell(v.at("q1")), cell(v.at("q3"))});
                plot.boxes.push_back(box_of(k, v));
            }
            files.push_back(csv.path());
            viz::render_box_plot(plot).save_png(out / "confidence.png");
            files.push_back(out / "confidence.png");
        }
        if (ev.at("defense").is_array() && !ev.at("defense").empty()) {
            CsvFile csv(out / "defense.csv");
            std::vector<std::string> attacks{"natural"};
            for (const char* k : {"fgsm", "pgd", "cw"})
                if (ev.at("defense")[0].contains(k)) attacks.push_back(k);
            std::vector<std::string> header{"defense", "model", "seed"};
            header.insert(header.end(), attacks.begin(), attacks.end());
            csv.row(header);
            // seed-averaged rows feed the chart
            std::map<std::string, std::vector<double>> sums;
            std::map<std::string, int> counts;
            std::vector<std::string> order;
            for (const auto& r : ev.at("defense")) {
                std::string name = r.at("kind").get<std::string>();
                for (auto& ch : name) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
                if (r.at("variant") == "cafe") name += "_CAFE";
                std::vector<std::string> cells{name, r.at("variant"), std::to_string(r.at("seed").get<std::uint64_t>())};
                auto& acc = sums[name];
                if (acc.empty()) {
                    acc.assign(attacks.size(), 0.0);
                    order.push_back(name);
                }
                for (std::size_t i = 0; i < attacks.size(); ++i) {
                    const double v = r.at(attacks[i]);
                    acc[i] += v;
                    cells.push_back(cell(v));
                }
                counts[name]++;
                csv.row(cells);
            }
            viz::BarChart chart{"Defense comparison (seed mean)", "accuracy %", attacks, order, {}, 100};
            for (const auto& name : order) {
                std::vector<std::string> cells{name, "mean", "all"};
                for (auto& v : sums[name]) {
                    v /= counts[name];
                    cells.push_back(cell(v));
                }
                csv.row(cells);
            }
            for (std::size_t a = 0; a < attacks.size(); ++a) {
                std::vector<double> row;
                for (const auto& name : order) row.push_back(sums[name][a]);
                chart.values.push_back(row);
            }
            files.push_back(csv.path());
            viz::render_bar_chart(chart).save_png(out / "defense.png");
            files.push_back(out / "defense.png");
        }
    }

    if (stages.contains("ablate")) {
        const json& pts = stages.at("ablate").at("points");
        CsvFile csv(out / "ablation.csv");
        csv.row({"lambda", "rademacher_median", "rademacher_mean", "rademacher_q1", "rademacher_q3", "imbalance_ratio", "Adv", "CF",
                 "CC", "AC"});
        viz::BoxPlot plot{"Rademacher distance proxy", "d", {}};
        viz::BarChart imb{"Imbalance ratio (CC, PGD)", "min/max class count", {}, {"imbalance"}, {}, 1.0};
        for (const auto& p : pts) {
            const std::string label = "lambda " + format_number(p.at("lambda").get<double>());
            const json& r = p.at("rademacher");
            const json& c = p.at("conjunctions_pgd");
            csv.row({format_number(p.at("lambda").get<double>()), cell(r.at("median")), cell(r.at("mean")), cell(r.at("q1")),
                     cell(r.at("q3")), cell(p.at("imbalance_ratio")), cell(c.at("adv")), cell(c.at("cf")), cell(c.at("cc")),
                     cell(c.at("ac"))});
            plot.boxes.push_back(box_of(label, r));
            imb.groups.push_back(label);
            imb.values.push_back({p.at("imbalance_ratio").get<double>()});
        }
        files.push_back(csv.path());
        if (!plot.boxes.empty()) {
            viz::render_box_plot(plot).save_png(out / "rademacher.png");
            viz::render_bar_chart(imb).save_png(out / "imbalance.png");
            files.push_back(out / "rademacher.png");
            files.push_back(out / "imbalance.png");
        }
    }

    if (stages.contains("train-cafe")) {
        CsvFile csv(out / "training.csv");
        csv.row({"kind", "variant", "seed", "natural_acc", "pgd_acc"});
        for (const auto& r : stages.at("train-cafe").at("runs"))
            csv.row({r.at("kind"), r.at("variant"), std::to_string(r.at("seed").get<std::uint64_t>()), cell(r.at("natural_acc")),
                     cell(r.at("pgd_acc"))});
        files.push_back(csv.path());
    }
    return files;
}

}  // namespace cafe::exp
