// Runs the acceptance criteria end to end and prints one PASS/FAIL line each.
// The exit code is non-zero only when a criterion could not be evaluated.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cafe/amr_gmm.hpp"
#include "cafe/experiment.hpp"
#include "cafe/iv_core.hpp"
#include "gradcheck.hpp"

using namespace cafe;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances
constexpr double kIvTolerance = 0.02;
constexpr double kOlsMinBias = 0.2;
constexpr double kQuickLimitSeconds = 60.0;
constexpr double kGradTolerance = 1e-4;
constexpr double kPipelineLimitSeconds = 15 * 60.0;
constexpr double kAcMarginOverAdv = 5.0;
constexpr double kAcBelowCcSlack = 1.0;
constexpr double kCwPgdGap = 5.0;
constexpr double kAccZChanceFactor = 1.5;
constexpr double kMinRho = 0.5;
constexpr double kCafeMinGain = 1.0;
constexpr double kCafeNaturalSlack = 3.0;

int passed = 0;

void verdict(int id, bool ok, const std::string& detail) {
    passed += ok;
    std::cout << "criterion " << id << ": " << (ok ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string num(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << std::fixed << v;
    return s.str();
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void criterion_scalar_iv() {
    const auto t0 = Clock::now();
    const iv::DgpParams p;
    const auto ds = iv::simulate_linear_dgp(p, 100000, 0);
    const double ols = iv::ols_fit(ds);
    const double tsls = iv::twosls_fit(ds);
    const double gmm = iv::gmm_minimax_fit(ds, iv::FunctionClass::Linear, iv::FunctionClass::Linear, {}).h.slope();
    const double secs = seconds_since(t0);
    const bool ok = std::abs(gmm - tsls) <= kIvTolerance && std::abs(tsls - p.theta) <= kIvTolerance &&
                    std::abs(ols - p.theta) >= kOlsMinBias && secs < kQuickLimitSeconds;
    verdict(1, ok,
            "gmm " + num(gmm) + ", 2sls " + num(tsls) + ", ols " + num(ols) + ", theta " + num(p.theta) + ", " + num(secs, 1) + " s");
}

void criterion_gradients() {
    const auto t0 = Clock::now();
    double worst_scalar = 0;
    {
        const auto b = iv::as_batch(iv::simulate_linear_dgp({}, 10, 11));
        for (auto hc : {iv::FunctionClass::Linear, iv::FunctionClass::Mlp})
            for (auto gc : {iv::FunctionClass::Linear, iv::FunctionClass::Mlp}) {
                iv::ScalarFunction h(hc, 21), g(gc, 22);
                for (auto& q : h.parameters()) q.mutable_value()[0] += 0.4;
                for (auto& q : g.parameters()) q.mutable_value()[0] -= 0.3;
                auto f = [&] { return iv::minimax_objective(h, g, b, 1.0); };
                for (auto q : h.parameters()) worst_scalar = std::max(worst_scalar, testutil::gradcheck(q, f));
                for (auto q : g.parameters()) worst_scalar = std::max(worst_scalar, testutil::gradcheck(q, f));
            }
    }
    double worst_amr = 0;
    {
        auto m = zoo::build_classifier<double>({"tiny-cnn", 3}, 5);
        const auto d = data::synthetic_shapes(3, 4, 22, 1000000);
        Tensor<double> x(d.images.shape()), xa(d.images.shape());
        const auto noise = testutil::random_tensor(d.images.shape(), 8, -8.0 / 255, 8.0 / 255);
        for (std::int64_t i = 0; i < x.size(); ++i) {
            x[i] = d.images[i];
            xa[i] = std::clamp(d.images[i] + noise[i], 0.0, 1.0);
        }
        const auto b = amr::compute_instrument(m, x, xa, d.labels);
        auto h = zoo::FeatureNet<double>(zoo::FeatureNetKind::Cnn, m.feature_shape(), 31);
        auto g = zoo::FeatureNet<double>(zoo::FeatureNetKind::Cnn, m.feature_shape(), 32);
        h.set_training(true);
        g.set_training(true);
        nn::FreezeGuard<double> frozen(m.parameters());
        auto objective = [&] { return amr::amr_terms(m, h, g, b, 1.0, amr::SignConvention::RoleConsistent).objective; };
        worst_amr = std::max(testutil::gradcheck_normwise(h.parameters(), objective),
                             testutil::gradcheck_normwise(g.parameters(), objective));
    }
    const double secs = seconds_since(t0);
    verdict(2, worst_scalar <= kGradTolerance && worst_amr <= kGradTolerance && secs < kQuickLimitSeconds,
            "scalar max rel err " + num(worst_scalar * 1e6, 3) + "e-6 (elementwise), AMR " + num(worst_amr * 1e6, 3) +
                "e-6 (normwise), " + num(secs, 1) + " s");
}

bool same_bytes(const fs::path& a, const fs::path& b) {
    std::ifstream fa(a, std::ios::binary), fb(b, std::ios::binary);
    std::stringstream sa, sb;
    sa << fa.rdbuf();
    sb << fb.rdbuf();
    return fa && fb && sa.str() == sb.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    std::string work = "acceptance_runs";
    std::string config_path;
    bool reuse = false;
    app.add_option("--work-dir", work, "Scratch directory for the runs");
    app.add_option("--config", config_path, "Pipeline config (defaults when omitted)");
    app.add_flag("--reuse", reuse, "Keep completed stages from an earlier invocation (timing then covers only new work)");
    CLI11_PARSE(app, argc, argv);

    try {
        criterion_scalar_iv();
        criterion_gradients();

        exp::RunConfig cfg = config_path.empty() ? exp::RunConfig{} : exp::load_config(config_path);
        const fs::path root = fs::absolute(work);
        if (!reuse) fs::remove_all(root);
        cfg.output_dir = (root / "main").string();
        exp::StageOptions quiet{false, true};

        const auto t0 = Clock::now();
        for (auto s : exp::all_stages())
            if (!exp::RunLayout{cfg.output_dir}.completed(s)) exp::run_stage(s, cfg, quiet);
        const double pipeline_secs = seconds_since(t0);
        std::cout << "pipeline: " << num(pipeline_secs, 1) << " s" << std::endl;
        exp::emit_report(cfg.output_dir);

        const json stages = exp::read_json(exp::RunLayout{cfg.output_dir}.summary()).at("stages");
        const json& ev = stages.at("evaluate");
        {
            const json& pgd = ev.at("conjunctions").at("pgd");
            const json& cw = ev.at("conjunctions").at("cw");
            const double adv = pgd.at("adv"), cf = pgd.at("cf"), cc = pgd.at("cc"), ac = pgd.at("ac"), cw_ac = cw.at("ac");
            const bool ok = cf < adv && ac > adv + kAcMarginOverAdv && ac >= cc - kAcBelowCcSlack &&
                            std::abs(cw_ac - ac) <= kCwPgdGap && pipeline_secs <= kPipelineLimitSeconds;
            verdict(3, ok,
                    "PGD Adv " + num(adv, 1) + ", CF " + num(cf, 1) + ", CC " + num(cc, 1) + ", AC " + num(ac, 1) + "; CW AC " +
                        num(cw_ac, 1) + "; pipeline " + num(pipeline_secs / 60, 1) + " min");
        }
        {
            const json& d = ev.at("diagnostics");
            const double acc_z = d.at("acc_Z"), acc_t = d.at("acc_T"), rho = d.at("rho"), chance = d.at("chance");
            verdict(4, acc_z <= kAccZChanceFactor * chance && rho >= kMinRho && acc_t > chance,
                    "acc_Z " + num(acc_z, 1) + " (limit " + num(kAccZChanceFactor * chance, 1) + "), rho " + num(rho, 3) +
                        ", acc_T " + num(acc_t, 1) + " (chance " + num(chance, 1) + ")");
        }

        // Three seeds for both defenses, reusing the main run's classifier and inversions.
        {
            exp::RunConfig c5 = cfg;
            c5.output_dir = (root / "defense").string();
            c5.defense.kinds = {defense::DefenseKind::Adv, defense::DefenseKind::Trades};
            c5.defense.seeds = {1, 2, 3};
            const exp::RunLayout l5{c5.output_dir};
            if (!l5.completed(exp::Stage::TrainCafe)) {
                for (auto s : {exp::Stage::Pretrain, exp::Stage::FitAmr, exp::Stage::Invert}) {
                    fs::remove_all(l5.stage_dir(s));
                    fs::create_directories(l5.stage_dir(s));
                    fs::copy(exp::RunLayout{cfg.output_dir}.stage_dir(s), l5.stage_dir(s), fs::copy_options::recursive);
                }
                exp::run_stage(exp::Stage::TrainCafe, c5, quiet);
            }
            const json means = exp::read_json(l5.stage_dir(exp::Stage::TrainCafe) / "summary.json").at("means");
            bool ok = true;
            std::string detail;
            for (const char* kind : {"adv", "trades"}) {
                const json& m = means.at(kind);
                const double gain = m.at("delta_pgd"), dnat = m.at("delta_natural");
                ok = ok && gain >= kCafeMinGain && std::abs(dnat) <= kCafeNaturalSlack;
                detail += std::string(detail.empty() ? "" : "; ") + kind + " PGD " + num(m["baseline"]["pgd_acc"], 2) + " -> " +
                          num(m["cafe"]["pgd_acc"], 2) + ", natural " + num(m["baseline"]["natural_acc"], 2) + " -> " +
                          num(m["cafe"]["natural_acc"], 2);
            }
            verdict(5, ok, detail + " (3-seed means)");
        }
        {
            const json& pts = stages.at("ablate").at("points");
            const json *p0 = nullptr, *p1 = nullptr;
            for (const auto& p : pts) {
                if (p.at("lambda") == 0.0) p0 = &p;
                if (p.at("lambda") == 1.0) p1 = &p;
            }
            if (!p0 || !p1) throw std::runtime_error("the ablation needs lambda 0 and lambda 1");
            const double r0 = (*p0)["rademacher"]["median"], r1 = (*p1)["rademacher"]["median"];
            const double i0 = (*p0)["imbalance_ratio"], i1 = (*p1)["imbalance_ratio"];
            verdict(6, r1 < r0 && i1 > i0,
                    "median Rademacher " + num(r0) + " -> " + num(r1) + ", imbalance " + num(i0) + " -> " + num(i1));
        }
        {
            const long attacks = ev.at("robustness").at("violations");
            const long total = ev.at("violations");
            const long inv_test = ev.at("inversion").at("violations");
            const long inv_train = stages.at("invert").at("violations");
            verdict(7, total == 0 && inv_train == 0,
                    "violations: f0 attacks " + std::to_string(attacks) + ", all evaluation outputs " + std::to_string(total) +
                        " (test inversions " + std::to_string(inv_test) + "), train inversions " + std::to_string(inv_train));
        }
        {
            const fs::path copy = root / "rerun";
            fs::remove_all(copy);
            fs::copy(cfg.output_dir, copy, fs::copy_options::recursive);
            exp::RunConfig c8 = cfg;
            c8.output_dir = copy.string();
            std::vector<std::string> differing;
            int files = 0;
            for (auto s : exp::all_stages()) {
                exp::run_stage(s, c8, {true, true});
                const auto a = exp::RunLayout{cfg.output_dir}.stage_dir(s), b = exp::RunLayout{copy}.stage_dir(s);
                for (const auto& e : fs::recursive_directory_iterator(a)) {
                    if (!e.is_regular_file()) continue;
                    ++files;
                    if (!same_bytes(e.path(), b / fs::relative(e.path(), a))) differing.push_back(fs::relative(e.path(), root).string());
                }
            }
            for (const char* f : {"summary.json", "metrics.jsonl"}) {
                ++files;
                if (!same_bytes(fs::path(cfg.output_dir) / f, copy / f)) differing.push_back(f);
            }
            std::string detail = std::to_string(files - static_cast<int>(differing.size())) + "/" + std::to_string(files) +
                                 " stage files byte-identical after rerunning every stage";
            for (const auto& d : differing) detail += "; differs: " + d;
            verdict(8, differing.empty(), detail);
        }
    } catch (const std::exception& e) {
        std::cout << "acceptance aborted: " << e.what() << std::endl;
        return 2;
    }
    std::cout << "acceptance: " << passed << "/8 criteria passed" << std::endl;
    return 0;
}
