#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <vector>

#include "cafe/attack.hpp"
#include "cafe/data.hpp"
#include "cafe/model_zoo.hpp"
#include "json.hpp"

namespace cafe::inversion {

class InversionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct InversionConfig {
    double gamma = attack::kDefaultEps;
    int steps = 30;
    double step_size = 0;  // 0 means gamma / 10
    double early_stop_kl = 1e-4;
    double smoothing = 1e-12;
    bool adversarial_init = false;  // start from x_adv (projected) instead of x

    double resolved_step() const { return step_size > 0 ? step_size : gamma / 10; }
    void validate() const;
};

struct CausalInversionResult {
    Tensor<float> x_causal;
    Tensor<float> delta;  // x_causal - x
    std::vector<double> kl_initial;
    std::vector<double> kl_final;  // best over all iterates
    int steps_used = 0;
    Tensor<float> target_log_probs;  // log head(f_nat + h(z)), fixed during the search
    /// Mean best-so-far KL after each step; non-increasing.
    std::vector<double> best_kl_trace;
    double smoothing = 0;
};

/// KL(p || q) per row with both sides smoothed by `eps` before the log.
std::vector<double> smoothed_kl_rows(const Tensor<float>& log_p, const Tensor<float>& log_q, double eps);

/// Projected signed-gradient search for an L-infinity bounded perturbation
/// whose prediction matches the causal-feature prediction
/// head(f_nat + h(z)) with z = f(x_adv) - f(x). Samples stop moving once their
/// KL drops below cfg.early_stop_kl. The best iterate per sample is returned.
CausalInversionResult invert_causal(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, const Tensor<float>& x,
                                    const Tensor<float>& x_adv, const InversionConfig& cfg);

/// Inversions keyed by sample id, with the causal target distributions.
class InversionArchive {
public:
    InversionArchive() = default;
    InversionArchive(std::vector<std::int64_t> ids, Tensor<float> x_causal, Tensor<float> delta, Tensor<float> target_log_probs,
                     std::vector<double> kl_initial, std::vector<double> kl_final, nlohmann::json metadata = nlohmann::json::object());

    int size() const { return static_cast<int>(ids_.size()); }
    const std::vector<std::int64_t>& ids() const { return ids_; }
    bool contains(std::int64_t id) const { return index_.count(id) > 0; }
    const nlohmann::json& metadata() const { return metadata_; }
    const std::vector<double>& kl_initial() const { return kl_initial_; }
    const std::vector<double>& kl_final() const { return kl_final_; }
    const Tensor<float>& x_causal() const { return x_causal_; }
    const Tensor<float>& delta() const { return delta_; }

    /// Rows for the given ids; throws InversionError naming the first missing id.
    Tensor<float> causal_images(const std::vector<std::int64_t>& ids) const;
    Tensor<float> target_log_probs(const std::vector<std::int64_t>& ids) const;

    void save(const std::filesystem::path& path) const;
    static InversionArchive load(const std::filesystem::path& path);

private:
    Tensor<float> rows_of(const Tensor<float>& src, const std::vector<std::int64_t>& ids) const;

    std::vector<std::int64_t> ids_;
    Tensor<float> x_causal_, delta_, target_log_probs_;
    std::vector<double> kl_initial_, kl_final_;
    nlohmann::json metadata_ = nlohmann::json::object();
    std::map<std::int64_t, int> index_;
};

/// Attack `dataset` with `attack_spec` against `model` and invert every
/// sample chunkwise; seeding follows attack::attack_dataset.
InversionArchive build_archive(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, const data::ImageBatch& dataset,
                               const attack::AttackSpec& attack_spec, const InversionConfig& cfg, std::uint64_t seed,
                               int chunk = 256);
/// Same archive from precomputed adversarial inputs aligned with `dataset`.
InversionArchive build_archive(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, const data::ImageBatch& dataset,
                               const Tensor<float>& adversarial, const InversionConfig& cfg, int chunk = 256);

}  // namespace cafe::inversion
