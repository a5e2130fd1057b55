#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "crashsev/common.hpp"
#include "crashsev/nn/graph.hpp"

namespace crashsev::nn {

enum class Variant { MambaNet, MambaAttention };
std::string variant_name(Variant v);
Variant parse_variant(const std::string& s);

struct ModelSpec {
    Variant variant = Variant::MambaNet;
    std::size_t embed_width = 32;
    std::size_t n_state = 16;
    std::size_t dt_rank = 2;
    std::size_t conv_kernel = 3;
    std::size_t heads = 4;
    std::vector<std::size_t> hidden{128, 64};
    double dropout = 0.3;
    std::size_t n_classes = kNumClasses;
    /// Token (source variable) of every input column; tokens are 0..n_tokens-1 in sequence order.
    std::vector<int> column_group;

    std::size_t n_inputs() const { return column_group.size(); }
    std::size_t n_tokens() const;
    void validate() const;

    static ModelSpec mamba_net(std::vector<int> column_group);
    static ModelSpec mamba_attention(std::vector<int> column_group);
};

/// Anything the trainer can fit: a parameter list and a differentiable batch forward.
template <class T>
class Classifier {
public:
    virtual ~Classifier() = default;
    virtual std::vector<Parameter<T>*> parameters() = 0;
    /// x [B, n_inputs] -> logits [B, n_classes]
    virtual Var<T> forward(Graph<T>& g, const Tensor<T>& x, bool train, Rng& rng) = 0;
    virtual std::size_t n_inputs() const = 0;
    virtual std::size_t n_classes() const = 0;
};

template <class T>
class SsmClassifier final : public Classifier<T> {
public:
    /// Initializes every parameter from `seed`.
    SsmClassifier(ModelSpec spec, std::uint64_t seed);
    /// Uninitialized shell for loading; forward throws until parameters are set.
    explicit SsmClassifier(ModelSpec spec);

    std::vector<Parameter<T>*> parameters() override;
    Var<T> forward(Graph<T>& g, const Tensor<T>& x, bool train, Rng& rng) override;
    std::size_t n_inputs() const override { return spec_.n_inputs(); }
    std::size_t n_classes() const override { return spec_.n_classes; }

    const ModelSpec& spec() const { return spec_; }
    bool initialized() const { return initialized_; }
    void mark_initialized() { initialized_ = true; }
    Parameter<T>* find(const std::string& name);

private:
    Parameter<T>& add(const std::string& name, std::vector<std::size_t> shape);
    void build();

    ModelSpec spec_;
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    bool initialized_ = false;
};

/// Eval-mode logits for every row of x, evaluated in chunks of `chunk` rows.
template <class T>
Tensor<T> predict_logits(Classifier<T>& model, const Matrix& x, std::size_t chunk = 512);
std::vector<int> argmax_rows(const Tensor<float>& logits);
std::vector<int> argmax_rows(const Tensor<double>& logits);

/// Copies rows [begin, end) of a double matrix into a tensor.
template <class T>
Tensor<T> to_tensor(const Matrix& x, std::size_t begin, std::size_t end);
template <class T>
Tensor<T> gather_tensor(const Matrix& x, const std::vector<std::size_t>& rows);

}  // namespace crashsev::nn
