#include "cafe/causal_inversion.hpp"

#include <cmath>

#include "cafe/amr_gmm.hpp"
#include "cafe/checkpoint.hpp"

namespace cafe::inversion {

using ag::Var;

void InversionConfig::validate() const {
    if (!(gamma > 0 && gamma < 1)) throw InversionError("gamma must lie in (0, 1)");
    if (steps < 0) throw InversionError("steps must be non-negative");
    if (!(resolved_step() > 0)) throw InversionError("step size must be positive");
    if (!(smoothing > 0)) throw InversionError("smoothing constant must be positive");
}

std::vector<double> smoothed_kl_rows(const Tensor<float>& log_p, const Tensor<float>& log_q, double eps) {
    require_same_shape(log_p, log_q, "smoothed_kl_rows");
    const int n = log_p.dim(0), k = log_p.dim(1);
    std::vector<double> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        double s = 0;
        for (int j = 0; j < k; ++j) {
            const double p = std::exp(static_cast<double>(log_p[i * k + j]));
            const double q = std::exp(static_cast<double>(log_q[i * k + j]));
            s += p * (std::log(p + eps) - std::log(q + eps));
        }
        out[static_cast<std::size_t>(i)] = s;
    }
    return out;
}

CausalInversionResult invert_causal(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, const Tensor<float>& x,
                                    const Tensor<float>& x_adv, const InversionConfig& cfg) {
    cfg.validate();
    if (x.shape() != x_adv.shape()) throw ShapeError("invert_causal: natural and adversarial batches differ in shape");
    const int n = x.dim(0);
    zoo::ModeGuard model_mode(model, false);
    zoo::ModeGuard h_mode(h, false);
    nn::FreezeGuard<float> frozen(model.parameters());
    nn::FreezeGuard<float> frozen_h(h.parameters());

    CausalInversionResult r;
    r.smoothing = cfg.smoothing;
    {
        ag::NoGradGuard ng;
        const auto batch = amr::compute_instrument(model, x, x_adv, std::vector<int>(static_cast<std::size_t>(n), 0));
        r.target_log_probs = model.head(ag::add(Var<float>(batch.f_nat), h.forward(Var<float>(batch.z)))).value();
    }
    // Constant smoothed target pieces: p and log(p + eps).
    Tensor<float> p = r.target_log_probs, log_p_eps = r.target_log_probs;
    for (std::int64_t i = 0; i < p.size(); ++i) {
        const double pv = std::exp(static_cast<double>(r.target_log_probs[i]));
        p[i] = static_cast<float>(pv);
        log_p_eps[i] = static_cast<float>(std::log(pv + cfg.smoothing));
    }

    const auto rs = x.row_size();
    Tensor<float> cur = x;
    if (cfg.adversarial_init) {
        for (std::int64_t i = 0; i < cur.size(); ++i) {
            const auto b = attack::feasible_box(x[i], cfg.gamma);
            cur[i] = std::clamp(x_adv[i], b.lo, b.hi);
        }
    }
    Tensor<float> best = cur;
    std::vector<double> best_kl(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::vector<char> active(static_cast<std::size_t>(n), 1);

    // Evaluates KL at `cur`, updates the best iterate, and returns the differentiable total.
    auto evaluate = [&](bool want_grad) {
        Var<float> xv(cur, want_grad);
        const Var<float> lq = model.forward(xv);
        const Var<float> terms = ag::mul(Var<float>(p), ag::sub(Var<float>(log_p_eps), ag::log_add_eps(lq, static_cast<float>(cfg.smoothing))));
        const Var<float> kl = ag::row_sum(terms);
        for (int i = 0; i < n; ++i) {
            const double v = kl.value()[i];
            if (!std::isfinite(v)) throw InversionError("non-finite KL for sample index " + std::to_string(i));
            if (v < best_kl[static_cast<std::size_t>(i)]) {
                best_kl[static_cast<std::size_t>(i)] = v;
                std::copy_n(cur.data() + i * rs, rs, best.data() + i * rs);
            }
            if (v < cfg.early_stop_kl) active[static_cast<std::size_t>(i)] = 0;
        }
        if (want_grad) ag::sum(kl).backward();
        return xv;
    };

    auto mean_of = [](const std::vector<double>& v) {
        double s = 0;
        for (double e : v) s += e;
        return s / static_cast<double>(v.size());
    };

    const double step = cfg.resolved_step();
    for (int s = 0; s < cfg.steps; ++s) {
        const Var<float> xv = evaluate(true);
        if (s == 0) r.kl_initial = best_kl;
        else r.best_kl_trace.push_back(mean_of(best_kl));
        if (std::none_of(active.begin(), active.end(), [](char a) { return a != 0; })) break;
        const auto& g = xv.grad();
        for (int i = 0; i < n; ++i) {
            if (!active[static_cast<std::size_t>(i)]) continue;
            for (std::int64_t k = i * rs; k < (i + 1) * rs; ++k) {
                if (!std::isfinite(g[k])) throw InversionError("non-finite gradient for sample index " + std::to_string(i));
                const float sg = g[k] > 0 ? 1.0f : (g[k] < 0 ? -1.0f : 0.0f);
                const auto b = attack::feasible_box(x[k], cfg.gamma);
                cur[k] = std::clamp(static_cast<float>(cur[k] - step * sg), b.lo, b.hi);
            }
        }
        r.steps_used = s + 1;
    }
    {
        ag::NoGradGuard ng;
        evaluate(false);
        if (r.kl_initial.empty()) r.kl_initial = best_kl;
        r.best_kl_trace.push_back(mean_of(best_kl));
    }
    r.kl_final = best_kl;
    r.x_causal = best;
    r.delta = best;
    for (std::int64_t i = 0; i < r.delta.size(); ++i) r.delta[i] -= x[i];
    return r;
}

InversionArchive::InversionArchive(std::vector<std::int64_t> ids, Tensor<float> x_causal, Tensor<float> delta,
                                   Tensor<float> target_log_probs, std::vector<double> kl_initial,
                                   std::vector<double> kl_final, nlohmann::json metadata)
    : ids_(std::move(ids)),
      x_causal_(std::move(x_causal)),
      delta_(std::move(delta)),
      target_log_probs_(std::move(target_log_probs)),
      kl_initial_(std::move(kl_initial)),
      kl_final_(std::move(kl_final)),
      metadata_(std::move(metadata)) {
    const int n = static_cast<int>(ids_.size());
    if (x_causal_.dim(0) != n || delta_.dim(0) != n || target_log_probs_.dim(0) != n ||
        static_cast<int>(kl_initial_.size()) != n || static_cast<int>(kl_final_.size()) != n)
        throw InversionError("inversion archive parts disagree on sample count");
    for (int i = 0; i < n; ++i)
        if (!index_.emplace(ids_[static_cast<std::size_t>(i)], i).second)
            throw InversionError("duplicate sample id " + std::to_string(ids_[static_cast<std::size_t>(i)]) + " in archive");
}

Tensor<float> InversionArchive::rows_of(const Tensor<float>& src, const std::vector<std::int64_t>& ids) const {
    Shape s = src.shape();
    s[0] = static_cast<int>(ids.size());
    Tensor<float> out(s);
    const auto rs = src.row_size();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto it = index_.find(ids[i]);
        if (it == index_.end()) throw InversionError("missing inversion archive entry for sample id " + std::to_string(ids[i]));
        std::copy_n(src.data() + it->second * rs, rs, out.data() + static_cast<std::int64_t>(i) * rs);
    }
    return out;
}

Tensor<float> InversionArchive::causal_images(const std::vector<std::int64_t>& ids) const { return rows_of(x_causal_, ids); }

Tensor<float> InversionArchive::target_log_probs(const std::vector<std::int64_t>& ids) const {
    return rows_of(target_log_probs_, ids);
}

void InversionArchive::save(const std::filesystem::path& path) const {
    ckpt::Checkpoint c;
    c.header.kind = "inversion_archive";
    c.header.arch = "";
    c.header.split = "";
    c.header.metadata = metadata_;
    c.header.metadata["ids"] = ids_;
    c.header.metadata["kl_initial"] = kl_initial_;
    c.header.metadata["kl_final"] = kl_final_;
    c.tensors.emplace("x_causal", x_causal_.cast<double>());
    c.tensors.emplace("delta", delta_.cast<double>());
    c.tensors.emplace("target_log_probs", target_log_probs_.cast<double>());
    ckpt::write_checkpoint(c, path);
}

InversionArchive InversionArchive::load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw InversionError("inversion archive " + path.string() + " does not exist");
    auto c = ckpt::read_checkpoint(path);
    if (c.header.kind != "inversion_archive") throw InversionError(path.string() + " is not an inversion archive");
    auto meta = c.header.metadata;
    auto ids = meta.at("ids").get<std::vector<std::int64_t>>();
    auto kl0 = meta.at("kl_initial").get<std::vector<double>>();
    auto kl1 = meta.at("kl_final").get<std::vector<double>>();
    meta.erase("ids");
    meta.erase("kl_initial");
    meta.erase("kl_final");
    return InversionArchive(std::move(ids), c.tensors.at("x_causal").cast<float>(), c.tensors.at("delta").cast<float>(),
                            c.tensors.at("target_log_probs").cast<float>(), std::move(kl0), std::move(kl1), std::move(meta));
}

InversionArchive build_archive(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, const data::ImageBatch& dataset,
                               const attack::AttackSpec& attack_spec, const InversionConfig& cfg, std::uint64_t seed,
                               int chunk) {
    if (dataset.empty()) throw InversionError("cannot build an archive for an empty dataset");
    return build_archive(model, h, dataset, attack::attack_dataset(model, dataset, attack_spec, seed, chunk), cfg, chunk);
}

InversionArchive build_archive(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, const data::ImageBatch& dataset,
                               const Tensor<float>& adv, const InversionConfig& cfg, int chunk) {
    if (dataset.empty()) throw InversionError("cannot build an archive for an empty dataset");
    if (adv.shape() != dataset.images.shape()) throw InversionError("adversarial batch does not match the dataset shape");
    std::vector<Tensor<float>> xc, dl, tl;
    std::vector<double> kl0, kl1;
    int steps_used = 0;
    for (int b = 0; b < dataset.size(); b += chunk) {
        const int e = std::min(dataset.size(), b + chunk);
        auto r = invert_causal(model, h, dataset.images.slice_rows(b, e), adv.slice_rows(b, e), cfg);
        xc.push_back(std::move(r.x_causal));
        dl.push_back(std::move(r.delta));
        tl.push_back(std::move(r.target_log_probs));
        kl0.insert(kl0.end(), r.kl_initial.begin(), r.kl_initial.end());
        kl1.insert(kl1.end(), r.kl_final.begin(), r.kl_final.end());
        steps_used = std::max(steps_used, r.steps_used);
    }
    nlohmann::json meta = {{"gamma", cfg.gamma},
                           {"steps", cfg.steps},
                           {"step_size", cfg.resolved_step()},
                           {"early_stop_kl", cfg.early_stop_kl},
                           {"smoothing", cfg.smoothing},
                           {"adversarial_init", cfg.adversarial_init},
                           {"steps_used", steps_used}};
    return InversionArchive(dataset.ids, concat_rows(xc), concat_rows(dl), concat_rows(tl), std::move(kl0), std::move(kl1),
                            std::move(meta));
}

}  // namespace cafe::inversion
