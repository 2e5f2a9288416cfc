#include "fedsem/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedsem/data.hpp"
#include "fedsem/error.hpp"
#include "fedsem/rng.hpp"

namespace fedsem::model {

namespace {

// Pre-activation and activation of every layer for one batch.
struct ForwardPass {
    std::vector<Matrix> activations;  // activations[0] = inputs, back() = probabilities
    std::vector<Matrix> pre_activations;
};

void check_inputs(const ModelParams& params, const Matrix& inputs, const char* where) {
    if (params.layer_dims.size() < 2 || params.weights.empty()) {
        throw ShapeError(std::string(where) + ": parameters have no layers");
    }
    if (inputs.cols() != params.input_dim()) {
        throw ShapeError(std::string(where) + ": input has " + std::to_string(inputs.cols()) +
                         " columns, model expects " + std::to_string(params.input_dim()));
    }
}

void check_batch(const ModelParams& params, const Batch& batch, const char* where) {
    if (batch.inputs.rows() == 0) {
        throw InvalidArgument(std::string(where) + ": empty batch");
    }
    check_inputs(params, batch.inputs, where);
    if (batch.targets.rows() != batch.inputs.rows() || batch.targets.cols() != params.num_classes()) {
        throw ShapeError(std::string(where) + ": targets shape does not match inputs and class count");
    }
}

// out = in * w + b
Matrix affine(const Matrix& in, const Matrix& w, const std::vector<double>& b) {
    Matrix out(in.rows(), w.cols());
    for (std::size_t r = 0; r < in.rows(); ++r) {
        auto dst = out.row(r);
        std::copy(b.begin(), b.end(), dst.begin());
        const auto src = in.row(r);
        for (std::size_t k = 0; k < in.cols(); ++k) {
            const double a = src[k];
            if (a == 0.0) {
                continue;
            }
            const auto wk = w.row(k);
            for (std::size_t c = 0; c < dst.size(); ++c) {
                dst[c] += a * wk[c];
            }
        }
    }
    return out;
}

void softmax_rows(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        const double peak = *std::max_element(row.begin(), row.end());
        double total = 0.0;
        for (double& v : row) {
            v = std::exp(v - peak);
            total += v;
        }
        for (double& v : row) {
            v /= total;
        }
    }
}

ForwardPass run_forward(const ModelParams& params, const Matrix& inputs) {
    ForwardPass pass;
    pass.activations.reserve(params.num_layers() + 1);
    pass.pre_activations.reserve(params.num_layers());
    pass.activations.push_back(inputs);
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
        Matrix z = affine(pass.activations.back(), params.weights[l], params.biases[l]);
        Matrix a = z;
        if (l + 1 < params.num_layers()) {
            for (double& v : a.data()) {
                v = v > 0.0 ? v : 0.0;
            }
        } else {
            softmax_rows(a);
        }
        pass.pre_activations.push_back(std::move(z));
        pass.activations.push_back(std::move(a));
    }
    return pass;
}

double cross_entropy(const Matrix& probs, const Matrix& targets) {
    double total = 0.0;
    for (std::size_t r = 0; r < probs.rows(); ++r) {
        const auto p = probs.row(r);
        const auto y = targets.row(r);
        for (std::size_t c = 0; c < p.size(); ++c) {
            if (y[c] != 0.0) {
                total -= y[c] * std::log(std::max(p[c], kProbabilityFloor));
            }
        }
    }
    return total / static_cast<double>(probs.rows());
}

}  // namespace

std::size_t ModelParams::parameter_count() const noexcept {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        n += weights[l].size() + biases[l].size();
    }
    return n;
}

std::vector<double> ModelParams::flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (std::size_t l = 0; l < weights.size(); ++l) {
        out.insert(out.end(), weights[l].data().begin(), weights[l].data().end());
        out.insert(out.end(), biases[l].begin(), biases[l].end());
    }
    return out;
}

ModelParams ModelParams::unflatten(std::span<const std::size_t> layer_dims, std::span<const double> values) {
    ModelParams p = zeros(layer_dims);
    if (values.size() != p.parameter_count()) {
        throw ShapeError("unflatten: expected " + std::to_string(p.parameter_count()) + " values, got " +
                         std::to_string(values.size()));
    }
    auto it = values.begin();
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
        auto& w = p.weights[l].data();
        std::copy_n(it, w.size(), w.begin());
        it += static_cast<std::ptrdiff_t>(w.size());
        std::copy_n(it, p.biases[l].size(), p.biases[l].begin());
        it += static_cast<std::ptrdiff_t>(p.biases[l].size());
    }
    return p;
}

ModelParams ModelParams::zeros(std::span<const std::size_t> layer_dims) {
    validate_layer_dims(layer_dims);
    ModelParams p;
    p.layer_dims.assign(layer_dims.begin(), layer_dims.end());
    for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
        p.weights.emplace_back(layer_dims[l], layer_dims[l + 1]);
        p.biases.emplace_back(layer_dims[l + 1], 0.0);
    }
    return p;
}

bool ModelParams::same_shape(const ModelParams& other) const noexcept {
    return layer_dims == other.layer_dims && weights.size() == other.weights.size();
}

bool ModelParams::all_finite() const noexcept {
    auto finite = [](double v) { return std::isfinite(v); };
    for (std::size_t l = 0; l < weights.size(); ++l) {
        if (!std::all_of(weights[l].data().begin(), weights[l].data().end(), finite) ||
            !std::all_of(biases[l].begin(), biases[l].end(), finite)) {
            return false;
        }
    }
    return true;
}

OptimizerState OptimizerState::make(Solver kind, const ModelParams& like) {
    OptimizerState s;
    s.kind = kind;
    if (kind == Solver::adam) {
        s.first_moment = ModelParams::zeros(like.layer_dims);
        s.second_moment = ModelParams::zeros(like.layer_dims);
    }
    return s;
}

Batch make_batch(const Matrix& inputs, std::span<const int> labels, std::size_t num_classes) {
    if (inputs.rows() != labels.size()) {
        throw ShapeError("make_batch: row count does not match label count");
    }
    return Batch{inputs, data::one_hot(labels, num_classes)};
}

void validate_layer_dims(std::span<const std::size_t> layer_dims) {
    if (layer_dims.size() < 2) {
        throw InvalidConfig("layer_dims needs at least an input and an output dimension");
    }
    for (std::size_t d : layer_dims) {
        if (d == 0) {
            throw InvalidConfig("layer_dims entries must be positive");
        }
    }
}

ModelParams init_params(std::span<const std::size_t> layer_dims, std::uint64_t seed) {
    ModelParams p = ModelParams::zeros(layer_dims);
    Rng rng(seed);
    for (auto& w : p.weights) {
        const double scale = std::sqrt(2.0 / static_cast<double>(w.rows()));
        for (double& v : w.data()) {
            v = scale * rng.normal();
        }
    }
    return p;
}

Matrix forward(const ModelParams& params, const Matrix& inputs) {
    check_inputs(params, inputs, "forward");
    return std::move(run_forward(params, inputs).activations.back());
}

double loss(const ModelParams& params, const Batch& batch) {
    check_batch(params, batch, "loss");
    return cross_entropy(forward(params, batch.inputs), batch.targets);
}

Gradient backward(const ModelParams& params, const Batch& batch) {
    check_batch(params, batch, "backward");
    ForwardPass pass = run_forward(params, batch.inputs);
    const std::size_t rows = batch.inputs.rows();
    const double inv_rows = 1.0 / static_cast<double>(rows);

    // d loss / d logits. Clamped probabilities contribute a constant, so
    // their terms drop out of the derivative.
    const Matrix& probs = pass.activations.back();
    Matrix delta(rows, params.num_classes());
    for (std::size_t r = 0; r < rows; ++r) {
        const auto p = probs.row(r);
        const auto y = batch.targets.row(r);
        auto d = delta.row(r);
        double active_mass = 0.0;
        for (std::size_t c = 0; c < p.size(); ++c) {
            if (y[c] != 0.0 && p[c] >= kProbabilityFloor) {
                active_mass += y[c];
            }
        }
        for (std::size_t c = 0; c < p.size(); ++c) {
            const double direct = (y[c] != 0.0 && p[c] >= kProbabilityFloor) ? y[c] : 0.0;
            d[c] = (p[c] * active_mass - direct) * inv_rows;
        }
    }

    Gradient grad = ModelParams::zeros(params.layer_dims);
    for (std::size_t l = params.num_layers(); l-- > 0;) {
        const Matrix& a_prev = pass.activations[l];
        Matrix& gw = grad.weights[l];
        auto& gb = grad.biases[l];
        for (std::size_t r = 0; r < rows; ++r) {
            const auto a = a_prev.row(r);
            const auto d = delta.row(r);
            for (std::size_t c = 0; c < d.size(); ++c) {
                gb[c] += d[c];
            }
            for (std::size_t k = 0; k < a.size(); ++k) {
                if (a[k] == 0.0) {
                    continue;
                }
                auto g = gw.row(k);
                for (std::size_t c = 0; c < d.size(); ++c) {
                    g[c] += a[k] * d[c];
                }
            }
        }
        if (l == 0) {
            break;
        }
        const Matrix& w = params.weights[l];
        const Matrix& z_prev = pass.pre_activations[l - 1];
        Matrix next(rows, w.rows());
        for (std::size_t r = 0; r < rows; ++r) {
            const auto d = delta.row(r);
            auto n = next.row(r);
            for (std::size_t k = 0; k < w.rows(); ++k) {
                if (z_prev(r, k) <= 0.0) {
                    continue;
                }
                const auto wk = w.row(k);
                double s = 0.0;
                for (std::size_t c = 0; c < d.size(); ++c) {
                    s += wk[c] * d[c];
                }
                n[k] = s;
            }
        }
        delta = std::move(next);
    }
    return grad;
}

namespace {

// Applies fn(param, grad, m, v) over every coordinate.
template <typename Fn>
void for_each_coordinate(ModelParams& params, const Gradient& grad, ModelParams* m, ModelParams* v, Fn fn) {
    for (std::size_t l = 0; l < params.num_layers(); ++l) {
        auto visit = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>* mv,
                         std::vector<double>* vv) {
            for (std::size_t i = 0; i < p.size(); ++i) {
                fn(p[i], g[i], mv ? &(*mv)[i] : nullptr, vv ? &(*vv)[i] : nullptr);
            }
        };
        visit(params.weights[l].data(), grad.weights[l].data(), m ? &m->weights[l].data() : nullptr,
              v ? &v->weights[l].data() : nullptr);
        visit(params.biases[l], grad.biases[l], m ? &m->biases[l] : nullptr, v ? &v->biases[l] : nullptr);
    }
}

}  // namespace

std::pair<ModelParams, OptimizerState> optimizer_step(const ModelParams& params, const Gradient& grad,
                                                      OptimizerState state, double learning_rate) {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw InvalidConfig("optimizer_step: learning rate must be positive");
    }
    if (!params.same_shape(grad)) {
        throw ShapeError("optimizer_step: gradient shape does not match parameters");
    }
    ModelParams next = params;
    if (state.kind == Solver::sgd) {
        for_each_coordinate(next, grad, nullptr, nullptr,
                            [&](double& p, double g, double*, double*) { p -= learning_rate * g; });
        ++state.step_count;
        return {std::move(next), std::move(state)};
    }

    if (!state.first_moment.same_shape(params) || !state.second_moment.same_shape(params)) {
        throw ShapeError("optimizer_step: Adam moments do not match parameters");
    }
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double b1 = state.beta1;
    const double b2 = state.beta2;
    const double correction1 = 1.0 - std::pow(b1, t);
    const double correction2 = 1.0 - std::pow(b2, t);
    const double eps = state.epsilon;
    for_each_coordinate(next, grad, &state.first_moment, &state.second_moment,
                        [&](double& p, double g, double* m, double* v) {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            const double m_hat = *m / correction1;
                            const double v_hat = *v / correction2;
                            p -= learning_rate * m_hat / (std::sqrt(v_hat) + eps);
                        });
    return {std::move(next), std::move(state)};
}

std::uint64_t epoch_seed(std::uint64_t rng_seed, std::size_t epoch) noexcept {
    return rng_seed ^ static_cast<std::uint64_t>(epoch);
}

ModelParams train_local(const ModelParams& params, const LabeledSamples& samples, const LocalTraining& options,
                        std::uint64_t rng_seed) {
    if (samples.empty()) {
        throw ClientSkip("train_local: no training samples");
    }
    if (options.epochs == 0 || options.batch_size == 0) {
        throw InvalidConfig("train_local: epochs and batch_size must be positive");
    }
    if (options.learning_rate < 0.0 || !std::isfinite(options.learning_rate)) {
        throw InvalidConfig("train_local: learning rate must be nonnegative");
    }
    if (samples.inputs.rows() != samples.size()) {
        throw ShapeError("train_local: inputs and labels differ in length");
    }
    if (samples.num_classes != params.num_classes()) {
        throw ShapeError("train_local: class count does not match the model");
    }

    ModelParams current = params;
    if (options.learning_rate == 0.0) {
        return current;
    }
    OptimizerState state = OptimizerState::make(options.solver, current);
    std::vector<std::size_t> order(samples.size());
    std::vector<int> batch_labels;
    for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(epoch_seed(rng_seed, epoch));
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            const std::size_t stop = std::min(order.size(), start + options.batch_size);
            const std::span<const std::size_t> idx(order.data() + start, stop - start);
            batch_labels.clear();
            for (std::size_t i : idx) {
                batch_labels.push_back(samples.labels[i]);
            }
            const Batch batch = make_batch(samples.inputs.gather_rows(idx), batch_labels, samples.num_classes);
            const Gradient g = backward(current, batch);
            std::tie(current, state) = optimizer_step(current, g, std::move(state), options.learning_rate);
        }
    }
    return current;
}

std::vector<int> argmax_rows(const Matrix& probabilities) {
    std::vector<int> out(probabilities.rows());
    for (std::size_t r = 0; r < probabilities.rows(); ++r) {
        const auto row = probabilities.row(r);
        // max_element returns the first maximum, which is the lowest index.
        out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
}

std::vector<int> predict(const ModelParams& params, const Matrix& inputs) {
    check_inputs(params, inputs, "predict");
    return argmax_rows(forward(params, inputs));
}

Evaluation evaluate(const ModelParams& params, const LabeledSamples& test) {
    if (test.empty()) {
        throw InvalidArgument("evaluate: empty test set");
    }
    check_inputs(params, test.inputs, "evaluate");
    const Matrix probs = forward(params, test.inputs);
    const std::vector<int> predicted = argmax_rows(probs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
        hits += predicted[i] == test.labels[i] ? 1 : 0;
    }
    const Matrix targets = data::one_hot(test.labels, params.num_classes());
    return Evaluation{static_cast<double>(hits) / static_cast<double>(test.size()), cross_entropy(probs, targets)};
}

}  // namespace fedsem::model
