#ifndef PSRLAB_TAPE_HPP_
#define PSRLAB_TAPE_HPP_

#include <map>
#include <string>
#include <vector>

#include "psrlab/tensor.hpp"

namespace psrlab {

// Reverse-mode op set. Fixed and small; every rule has a hand-written
// backward that is checked against central finite differences.
enum class Op {
    kLeaf,
    kParam,
    kAdd,
    kSub,
    kScalarMul,
    kMul,
    kBiasAdd,
    kMatMul,
    kTranspose,
    kReshape,
    kConcat,
    kSlice,
    kMean,
    kSum,
    kTanh,
    kGelu,
    kExp,
    kSoftmax,
    kLayerNorm,
    kGather,
};

const char* op_name(Op op);

struct TapeNode {
    Op op = Op::kLeaf;
    int in0 = -1;
    int in1 = -1;
    int in2 = -1;
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool grad_alloc = false;

    double scalar = 0.0;                  // kScalarMul factor
    int axis_a = 0;                       // transpose axis / concat axis / slice axis
    int axis_b = 0;                       // transpose second axis
    std::size_t start = 0;                // slice start
    std::size_t len = 0;                  // slice length
    std::vector<std::size_t> gather_idx;  // kGather row indices
    std::string param_name;               // kParam
    std::vector<double> aux;              // kLayerNorm: xhat then per-row inv std
};

// Append-only computation record. Nodes are topologically ordered by
// construction; backward walks the record in reverse. Single-threaded by
// contract; run one tape per thread over a frozen parameter snapshot.
class Tape {
public:
    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

    int constant(Tensor v);
    int param(const std::string& name, const Tensor& v);

    int add(int a, int b);
    int sub(int a, int b);
    int scalar_mul(int a, double s);
    int mul(int a, int b);
    int bias_add(int a, int bias);
    int matmul(int a, int b);
    int transpose(int a, int axis_a, int axis_b);
    int reshape(int a, std::vector<std::size_t> new_shape);
    int concat(int a, int b, int axis);
    int slice(int a, int axis, std::size_t start, std::size_t len);
    int mean_all(int a);
    int sum_all(int a);
    int tanh(int a);
    int gelu(int a);
    int exp(int a);
    int softmax_last(int a);
    int layer_norm(int a, int gain, int bias);
    int gather_rows(int table, std::vector<std::size_t> indices);

    const Tensor& value(int id) const { return nodes_.at(static_cast<std::size_t>(id)).value; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(output)/d(output) with ones (scalar outputs) or an explicit
    // tensor, then returns accumulated gradients per parameter name.
    std::map<std::string, Tensor> backward(int node);
    std::map<std::string, Tensor> backward(int node, const Tensor& seed);

    // Gradient w.r.t. a non-parameter input captured by the last backward
    // call (used by tests that differentiate w.r.t. activations).
    const Tensor& grad_of(int id) const;

private:
    int push(TapeNode&& node);
    void check_value(int id);
    Tensor& grad_ref(int id);
    void backprop_node(int id);

    std::vector<TapeNode> nodes_;
    bool check_finite_ = true;
};

static constexpr double kLayerNormEps = 1e-6;

}  // namespace psrlab

#endif  // PSRLAB_TAPE_HPP_
