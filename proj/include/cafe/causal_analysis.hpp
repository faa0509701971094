#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cafe/attack.hpp"
#include "cafe/causal_inversion.hpp"
#include "cafe/data.hpp"
#include "cafe/model_zoo.hpp"

namespace cafe::analysis {

class AnalysisError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateInstrumentError : public AnalysisError {
public:
    using AnalysisError::AnalysisError;
};

/// Split-layer feature maps for one batch.
struct ConjunctionSet {
    Tensor<float> f_nat;
    Tensor<float> z;
    Tensor<float> adv;  // f(x_adv) itself
    Tensor<float> cf;   // f_nat + g(z)
    Tensor<float> cc;   // f_nat + h(g(z))
    Tensor<float> ac;   // f_nat + h(z)
};

ConjunctionSet conjunction_features(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, zoo::FeatureNet<float>& g,
                                    const Tensor<float>& x, const Tensor<float>& x_adv);

struct ConjunctionAccuracy {
    double adv = 0, cf = 0, cc = 0, ac = 0;  // percent
};

struct ConjunctionTable {
    double natural = 0;
    std::map<std::string, ConjunctionAccuracy> by_attack;
    /// Predicted class of each CC conjunction, per attack, in dataset order.
    std::map<std::string, std::vector<int>> cc_predictions;
};

/// Attack seeding follows attack::attack_dataset.
ConjunctionTable conjunction_robustness(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, zoo::FeatureNet<float>& g,
                                        const data::ImageBatch& dataset, const std::vector<attack::AttackSpec>& attacks,
                                        std::uint64_t seed, int chunk = 256);
/// Same table from precomputed attack outputs, keyed by attack kind.
ConjunctionTable conjunction_robustness(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h, zoo::FeatureNet<float>& g,
                                        const data::ImageBatch& dataset, const std::map<std::string, Tensor<float>>& adversarial,
                                        int chunk = 256);

enum class PearsonMode {
    PerSample,  // correlation over each sample's flattened features, averaged
    Global      // one correlation over the whole flattened dataset
};

struct DiagnosticsReport {
    double acc_T = 0;  // head(f_adv)
    double acc_Z = 0;  // head(z)
    double pearson_rho = 0;
    PearsonMode mode = PearsonMode::PerSample;
};

/// Throws DegenerateInstrumentError if either side has zero variance.
double pearson(const float* a, const float* b, std::int64_t n);

DiagnosticsReport iv_diagnostics(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset,
                                 const attack::AttackSpec& attack, std::uint64_t seed,
                                 PearsonMode mode = PearsonMode::PerSample, int chunk = 256);
DiagnosticsReport iv_diagnostics(zoo::SplitClassifier<float>& model, const data::ImageBatch& dataset, const Tensor<float>& adversarial,
                                 PearsonMode mode = PearsonMode::PerSample, int chunk = 256);

struct DistributionSummary {
    std::vector<double> values;
    double mean = 0, median = 0, q1 = 0, q3 = 0, min = 0, max = 0;
};
/// Quartiles by linear interpolation between order statistics.
DistributionSummary summarize(std::vector<double> values);

struct RademacherReport {
    DistributionSummary distance;
    std::vector<double> scores;  // per-sample amplification ||g(z)|| / ||z||
    int excluded_zero_norm = 0;
};

/// d_r = |mean_i sigma_i s_i| for `draws` independent Rademacher sign vectors.
DistributionSummary rademacher_from_scores(const std::vector<double>& scores, int draws, std::uint64_t seed);
/// Scores s_i = ||g(z_i)|| / ||z_i||; samples with ||z_i|| = 0 are excluded and counted.
RademacherReport rademacher_distance(zoo::FeatureNet<float>& g, const Tensor<float>& instruments, int draws, std::uint64_t seed);

/// min class count / max class count over classes 0..K-1.
double imbalance_ratio(const std::vector<int>& predictions, int num_classes);

struct ConfidenceProfile {
    /// Keys: natural, adversarial, ac, and inversion when an archive is given.
    std::map<std::string, DistributionSummary> sources;
};

/// True-class probability under each source.
ConfidenceProfile confidence_profile(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h,
                                     const data::ImageBatch& dataset, const attack::AttackSpec& attack, std::uint64_t seed,
                                     const inversion::InversionArchive* inversions = nullptr, int chunk = 256);
ConfidenceProfile confidence_profile(zoo::SplitClassifier<float>& model, zoo::FeatureNet<float>& h,
                                     const data::ImageBatch& dataset, const Tensor<float>& adversarial,
                                     const inversion::InversionArchive* inversions = nullptr, int chunk = 256);

}  // namespace cafe::analysis
