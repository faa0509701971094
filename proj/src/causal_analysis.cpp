#include "cafe/causal_analysis.hpp"

#include <algorithm>
#include <cmath>

#include "cafe/amr_gmm.hpp"

namespace cafe::analysis {

using ag::Var;

namespace {

Tensor<float> plus(const Tensor<float>& a, const Tensor<float>& b) {
    Tensor<float> out = a;
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

std::vector<int> argmax_rows(const Tensor<float>& lp) {
    const int n = lp.dim(0), k = lp.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const float* r = lp.data() + static_cast<std::int64_t>(i) * k;
        out[static_cast<std::size_t>(i)] = static_cast<int>(std::max_element(r, r + k) - r);
    }
    return out;
}

Tensor<float> head_of(zoo::SplitClassifier<float>& model, const Tensor<float>& f) { return model.head(Var<float>(f)).value(); }

void append(std::vector<int>& dst, const std::vector<int>& src) { dst.insert(dst.end(), src.begin(), src.end()); }

double quantile(const std::vector<double>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

}  // namespace

ConjunctionSet conjunction_features(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, zoo::FeatureNet<float>& g,
                                    const Tensor<float>& x, const Tensor<float>& x_adv) {
    const auto batch = amr::compute_instrument(model, x, x_adv, std::vector<int>(static_cast<std::size_t>(x.dim(0)), 0));
    zoo::ModeGuard hm(h, false);
    zoo::ModeGuard gm(g, false);
    ag::NoGradGuard ng;
    ConjunctionSet s;
    s.f_nat = batch.f_nat;
    s.z = batch.z;
    s.adv = batch.f_adv;
    const Tensor<float> gz = g.forward(Var<float>(batch.z)).value();
    s.cf = plus(batch.f_nat, gz);
    s.cc = plus(batch.f_nat, h.forward(Var<float>(gz)).value());
    s.ac = plus(batch.f_nat, h.forward(Var<float>(batch.z)).value());
    return s;
}

ConjunctionTable conjunction_robustness(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, zoo::FeatureNet<float>& g,
                                        const data::ImageBatch& dataset, const std::vector<attack::AttackSpec>& attacks,
                                        std::uint64_t seed, int chunk) {
    if (dataset.empty()) throw AnalysisError("conjunction robustness needs a non-empty dataset");
    for (const auto& a : attacks)
        if (a.kind != "fgsm" && a.kind != "pgd" && a.kind != "cw")
            throw AnalysisError("unsupported attack '" + a.kind + "' for conjunction robustness");
    std::map<std::string, Tensor<float>> adversarial;
    for (const auto& a : attacks) adversarial[a.kind] = attack::attack_dataset(model, dataset, a, seed, chunk);
    return conjunction_robustness(model, h, g, dataset, adversarial, chunk);
}

ConjunctionTable conjunction_robustness(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, zoo::FeatureNet<float>& g,
                                        const data::ImageBatch& dataset, const std::map<std::string, Tensor<float>>& adversarial,
                                        int chunk) {
    if (dataset.empty()) throw AnalysisError("conjunction robustness needs a non-empty dataset");
    zoo::ModeGuard mm(model, false);
    ConjunctionTable table;
    table.natural = attack::accuracy_percent(attack::predict(model, dataset.images, chunk), dataset.labels);
    for (const auto& [kind, adv] : adversarial) {
        if (adv.shape() != dataset.images.shape()) throw AnalysisError("adversarial '" + kind + "' does not match the dataset shape");
        std::vector<int> p_adv, p_cf, p_cc, p_ac;
        for (int b = 0; b < dataset.size(); b += chunk) {
            const int e = std::min(dataset.size(), b + chunk);
            const auto s = conjunction_features(model, h, g, dataset.images.slice_rows(b, e), adv.slice_rows(b, e));
            ag::NoGradGuard ng;
            append(p_adv, argmax_rows(head_of(model, s.adv)));
            append(p_cf, argmax_rows(head_of(model, s.cf)));
            append(p_cc, argmax_rows(head_of(model, s.cc)));
            append(p_ac, argmax_rows(head_of(model, s.ac)));
        }
        ConjunctionAccuracy acc;
        acc.adv = attack::accuracy_percent(p_adv, dataset.labels);
        acc.cf = attack::accuracy_percent(p_cf, dataset.labels);
        acc.cc = attack::accuracy_percent(p_cc, dataset.labels);
        acc.ac = attack::accuracy_percent(p_ac, dataset.labels);
        table.by_attack[kind] = acc;
        table.cc_predictions[kind] = std::move(p_cc);
    }
    return table;
}

double pearson(const float* a, const float* b, std::int64_t n) {
    if (n < 2) throw DegenerateInstrumentError("correlation needs at least two values");
    double ma = 0, mb = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double sab = 0, saa = 0, sbb = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        const double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0 || sbb == 0) throw DegenerateInstrumentError("degenerate instrument: zero variance in Z or T");
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

DiagnosticsReport iv_diagnostics(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset,
                                 const attack::AttackSpec& attack, std::uint64_t seed, PearsonMode mode, int chunk) {
    if (dataset.empty()) throw AnalysisError("diagnostics need a non-empty dataset");
    return iv_diagnostics(model, dataset, attack::attack_dataset(model, dataset, attack, seed, chunk), mode, chunk);
}

DiagnosticsReport iv_diagnostics(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset, const Tensor<float>& adv,
                                 PearsonMode mode, int chunk) {
    if (dataset.empty()) throw AnalysisError("diagnostics need a non-empty dataset");
    if (adv.shape() != dataset.images.shape()) throw AnalysisError("adversarial batch does not match the dataset shape");
    zoo::ModeGuard mm(model, false);
    std::vector<int> p_t, p_z;
    std::vector<Tensor<float>> zs, ts;
    double rho_sum = 0;
    for (int b = 0; b < dataset.size(); b += chunk) {
        const int e = std::min(dataset.size(), b + chunk);
        const auto batch = amr::compute_instrument(model, dataset.images.slice_rows(b, e), adv.slice_rows(b, e),
                                                   std::vector<int>(static_cast<std::size_t>(e - b), 0));
        ag::NoGradGuard ng;
        append(p_t, argmax_rows(head_of(model, batch.f_adv)));
        append(p_z, argmax_rows(head_of(model, batch.z)));
        if (mode == PearsonMode::PerSample) {
            const auto rs = batch.z.row_size();
            for (int i = 0; i < e - b; ++i) {
                try {
                    rho_sum += pearson(batch.z.data() + i * rs, batch.f_adv.data() + i * rs, rs);
                } catch (const DegenerateInstrumentError&) {
                    throw DegenerateInstrumentError("degenerate instrument: zero variance in Z or T for sample id " +
                                                    std::to_string(dataset.ids[static_cast<std::size_t>(b + i)]));
                }
            }
        } else {
            zs.push_back(batch.z);
            ts.push_back(batch.f_adv);
        }
    }
    DiagnosticsReport r;
    r.mode = mode;
    r.acc_T = attack::accuracy_percent(p_t, dataset.labels);
    r.acc_Z = attack::accuracy_percent(p_z, dataset.labels);
    if (mode == PearsonMode::PerSample) {
        r.pearson_rho = rho_sum / dataset.size();
    } else {
        const auto z = concat_rows(zs), t = concat_rows(ts);
        r.pearson_rho = pearson(z.data(), t.data(), z.size());
    }
    return r;
}

DistributionSummary summarize(std::vector<double> values) {
    DistributionSummary s;
    if (values.empty()) return s;
    s.values = values;
    std::sort(values.begin(), values.end());
    double total = 0;
    for (double v : values) total += v;
    s.mean = total / static_cast<double>(values.size());
    s.min = values.front();
    s.max = values.back();
    s.q1 = quantile(values, 0.25);
    s.median = quantile(values, 0.5);
    s.q3 = quantile(values, 0.75);
    return s;
}

DistributionSummary rademacher_from_scores(const std::vector<double>& scores, int draws, std::uint64_t seed) {
    if (draws < 100) throw AnalysisError("rademacher distance needs at least 100 draws");
    if (scores.empty()) throw AnalysisError("rademacher distance needs at least one usable instrument sample");
    Rng rng(derive_seed(seed, "rademacher"));
    std::vector<double> d(static_cast<std::size_t>(draws));
    for (auto& dr : d) {
        double s = 0;
        for (double v : scores) s += rng.coin() ? v : -v;
        dr = std::abs(s / static_cast<double>(scores.size()));
    }
    return summarize(std::move(d));
}

RademacherReport rademacher_distance(zoo::FeatureNet<float>& g, const Tensor<float>& instruments, int draws, std::uint64_t seed) {
    if (draws < 100) throw AnalysisError("rademacher distance needs at least 100 draws");
    zoo::ModeGuard gm(g, false);
    RademacherReport r;
    const int n = instruments.dim(0);
    const auto rs = instruments.row_size();
    for (int b = 0; b < n; b += 256) {
        const int e = std::min(n, b + 256);
        const Tensor<float> z = instruments.slice_rows(b, e);
        Tensor<float> gz;
        {
            ag::NoGradGuard ng;
            gz = g.forward(Var<float>(z)).value();
        }
        for (int i = 0; i < e - b; ++i) {
            double nz = 0, ng2 = 0;
            for (std::int64_t k = i * rs; k < (i + 1) * rs; ++k) {
                nz += static_cast<double>(z[k]) * z[k];
                ng2 += static_cast<double>(gz[k]) * gz[k];
            }
            if (nz == 0) {
                ++r.excluded_zero_norm;
                continue;
            }
            r.scores.push_back(std::sqrt(ng2) / std::sqrt(nz));
        }
    }
    r.distance = rademacher_from_scores(r.scores, draws, seed);
    return r;
}

double imbalance_ratio(const std::vector<int>& predictions, int num_classes) {
    if (predictions.empty()) throw AnalysisError("imbalance ratio needs at least one prediction");
    if (num_classes < 1) throw AnalysisError("imbalance ratio needs at least one class");
    std::vector<long> counts(static_cast<std::size_t>(num_classes), 0);
    for (int p : predictions) {
        if (p < 0 || p >= num_classes) throw AnalysisError("prediction " + std::to_string(p) + " is outside the class range");
        ++counts[static_cast<std::size_t>(p)];
    }
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    return static_cast<double>(*lo) / static_cast<double>(*hi);
}

ConfidenceProfile confidence_profile(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h,
                                     const data::ImageBatch& dataset, const attack::AttackSpec& attack, std::uint64_t seed,
                                     const inversion::InversionArchive* inversions, int chunk) {
    if (dataset.empty()) throw AnalysisError("confidence profile needs a non-empty dataset");
    return confidence_profile(model, h, dataset, attack::attack_dataset(model, dataset, attack, seed, chunk), inversions, chunk);
}

ConfidenceProfile confidence_profile(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h,
                                     const data::ImageBatch& dataset, const Tensor<float>& adv,
                                     const inversion::InversionArchive* inversions, int chunk) {
    if (dataset.empty()) throw AnalysisError("confidence profile needs a non-empty dataset");
    if (adv.shape() != dataset.images.shape()) throw AnalysisError("adversarial batch does not match the dataset shape");
    zoo::ModeGuard mm(model, false);
    zoo::ModeGuard hm(h, false);
    const bool with_inv = inversions && inversions->size() > 0;
    std::map<std::string, std::vector<double>> conf;
    auto collect = [&](const std::string& key, const Tensor<float>& lp, int offset) {
        const int k = lp.dim(1);
        auto& dst = conf[key];
        for (int i = 0; i < lp.dim(0); ++i) {
            const int y = dataset.labels[static_cast<std::size_t>(offset + i)];
            dst.push_back(std::clamp(std::exp(static_cast<double>(lp[static_cast<std::int64_t>(i) * k + y])), 0.0, 1.0));
        }
    };
    for (int b = 0; b < dataset.size(); b += chunk) {
        const int e = std::min(dataset.size(), b + chunk);
        const auto batch = amr::compute_instrument(model, dataset.images.slice_rows(b, e), adv.slice_rows(b, e),
                                                   std::vector<int>(static_cast<std::size_t>(e - b), 0));
        ag::NoGradGuard ng;
        collect("natural", head_of(model, batch.f_nat), b);
        collect("adversarial", head_of(model, batch.f_adv), b);
        collect("ac", head_of(model, plus(batch.f_nat, h.forward(Var<float>(batch.z)).value())), b);
        if (with_inv) {
            const std::vector<std::int64_t> ids(dataset.ids.begin() + b, dataset.ids.begin() + e);
            collect("inversion", model.forward(Var<float>(inversions->causal_images(ids))).value(), b);
        }
    }
    ConfidenceProfile p;
    for (auto& [key, v] : conf) p.sources[key] = summarize(std::move(v));
    return p;
}

}  // namespace cafe::analysis
