#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsem/matrix.hpp"

// Multilayer perceptron classifier with softmax cross-entropy and the two
// local solvers (SGD, Adam) used by every simulated client.
namespace fedsem::model {

// Lower clamp applied to probabilities before taking the log.
inline constexpr double kProbabilityFloor = 1e-12;

/// Dense layer stack. weights[l] is (layer_dims[l] x layer_dims[l+1]),
/// biases[l] has layer_dims[l+1] entries. Hidden layers use ReLU, the last
/// layer feeds a softmax.
struct ModelParams {
    std::vector<std::size_t> layer_dims;
    std::vector<Matrix> weights;
    std::vector<std::vector<double>> biases;

    std::size_t num_layers() const noexcept { return weights.size(); }
    std::size_t input_dim() const noexcept { return layer_dims.front(); }
    std::size_t num_classes() const noexcept { return layer_dims.back(); }
    std::size_t parameter_count() const noexcept;

    // Layer by layer: weights row-major, then biases.
    std::vector<double> flatten() const;
    static ModelParams unflatten(std::span<const std::size_t> layer_dims, std::span<const double> values);

    // All-zero parameters for the given architecture.
    static ModelParams zeros(std::span<const std::size_t> layer_dims);

    bool same_shape(const ModelParams& other) const noexcept;
    bool all_finite() const noexcept;

    bool operator==(const ModelParams&) const = default;
};

// Gradients share the parameter layout.
using Gradient = ModelParams;

enum class Solver { sgd, adam };

struct OptimizerState {
    Solver kind = Solver::sgd;
    std::uint64_t step_count = 0;
    // Empty for sgd.
    ModelParams first_moment;
    ModelParams second_moment;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    static OptimizerState make(Solver kind, const ModelParams& like);
};

struct Batch {
    Matrix inputs;   // B x input_dim
    Matrix targets;  // B x C, one-hot rows
};

Batch make_batch(const Matrix& inputs, std::span<const int> labels, std::size_t num_classes);

// Features with the labels a client is allowed to train or evaluate on.
struct LabeledSamples {
    Matrix inputs;
    std::vector<int> labels;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
};

void validate_layer_dims(std::span<const std::size_t> layer_dims);

// He-style init: weights ~ N(0, 2/fan_in), biases zero.
ModelParams init_params(std::span<const std::size_t> layer_dims, std::uint64_t seed);

// Row-wise class probabilities.
Matrix forward(const ModelParams& params, const Matrix& inputs);

double loss(const ModelParams& params, const Batch& batch);

// Exact gradient of loss() including the probability clamp.
Gradient backward(const ModelParams& params, const Batch& batch);

std::pair<ModelParams, OptimizerState> optimizer_step(const ModelParams& params, const Gradient& grad,
                                                      OptimizerState state, double learning_rate);

struct LocalTraining {
    std::size_t epochs = 1;
    std::size_t batch_size = 32;
    double learning_rate = 1e-4;
    Solver solver = Solver::adam;
};

// Seed used to shuffle sample order in the given epoch of a train_local call.
std::uint64_t epoch_seed(std::uint64_t rng_seed, std::size_t epoch) noexcept;

/// Mini-batch training on one client's samples. Each epoch visits the
/// samples in a fresh order drawn from epoch_seed(rng_seed, epoch); the
/// trailing short batch is kept. Optimizer state starts fresh on each call.
///
/// Throws ClientSkip when `samples` is empty.
ModelParams train_local(const ModelParams& params, const LabeledSamples& samples, const LocalTraining& options,
                        std::uint64_t rng_seed);

// Argmax per row, ties to the lowest class index.
std::vector<int> argmax_rows(const Matrix& probabilities);

std::vector<int> predict(const ModelParams& params, const Matrix& inputs);

struct Evaluation {
    double accuracy = 0.0;
    double mean_loss = 0.0;
};

Evaluation evaluate(const ModelParams& params, const LabeledSamples& test);

}  // namespace fedsem::model
