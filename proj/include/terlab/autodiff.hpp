#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "terlab/tensor.hpp"

namespace terlab::ad {

class Tape;

// Lightweight handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

enum class Op : std::uint8_t {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    Scale,
    Gelu,
    SoftmaxRows,
    LayerNorm,
    SumAll,
    MeanAll,
    RowMean,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    L2NormRows,
    LogSumExpRows,
    Diagonal,
    RowEntropy,
    GatedResidual,
    Sigmoid,
    BalancedBce,
    CrossEntropyLogits,
};

// Reverse-mode tape over Tensor2D values. Define-by-run: a tape is built per
// forward pass and discarded (or clear()ed) afterwards. Nodes are appended in
// topological order by construction; backward() walks them once, in reverse.
// Single-threaded by contract.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor2D value, bool requires_grad = false);

    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var add_row(Var x, Var row);           // x: TxD, row: 1xD broadcast over rows
    Var scale(Var a, double alpha);
    Var gelu(Var a);                       // tanh approximation
    Var softmax_rows(Var a);               // row-max subtraction
    Var layer_norm(Var x, Var gain, Var bias, double eps);
    Var sum_all(Var a);                    // -> 1x1
    Var mean_all(Var a);                   // -> 1x1
    Var row_mean(Var a);                   // TxD -> 1xD
    Var concat_rows(std::span<const Var> parts);
    Var concat_cols(std::span<const Var> parts);
    Var slice_rows(Var a, std::size_t r0, std::size_t r1); // [r0, r1)
    Var slice_cols(Var a, std::size_t c0, std::size_t c1); // [c0, c1)
    Var l2_normalize_rows(Var a);
    Var logsumexp_rows(Var a);             // TxD -> Tx1
    Var diagonal(Var a);                   // BxB -> Bx1
    Var row_entropy(Var a);                // TxD -> Tx1, Shannon entropy of row softmax
    Var gated_residual(Var f, Var gate, Var u); // f + gate*u; exact copy of f when gate == 0
    Var sigmoid(Var a);
    // Class-balanced binary cross-entropy over a score matrix: positives are
    // the given cells, every other cell is a negative down-weighted by
    // |P|/(MN-|P|). Scores are clamped to [eps, 1-eps] inside the log.
    Var balanced_bce(Var scores, const std::vector<std::pair<std::size_t, std::size_t>>& positives);
    Var cross_entropy_logits(Var logits, std::size_t label); // logits: 1xC

    // Populates gradients for every node reachable from `loss` (1x1).
    void backward(Var loss);

    const Tensor2D& value(Var v) const;
    const Tensor2D& grad(Var v); // zeros if the node was never reached

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

private:
    struct Node {
        Op op = Op::Leaf;
        bool requires_grad = false;
        std::uint8_t nargs = 0;
        std::array<int, 4> args{{-1, -1, -1, -1}};
        std::vector<int> extra_args;     // n-ary concats beyond 4 operands
        double s0 = 0.0, s1 = 0.0;       // scalar payload (eps, alpha, weights)
        std::size_t i0 = 0, i1 = 0;      // index payload (slice bounds, label)
        std::vector<double> aux;         // cached intermediates for backward
        std::vector<std::size_t> cells;  // positive cells for BalancedBce
        Tensor2D value;
        Tensor2D grad;
    };

    int push(Node n);
    Node& node(Var v);
    const Node& node(Var v) const;
    void check_owned(Var v, const char* op) const;
    bool any_requires_grad(std::span<const Var> vs) const;
    void add_to_grad(int id, const Tensor2D& g);
    Tensor2D& grad_buf(int id); // allocated to value shape on first touch
    void backward_node(int id);

    std::vector<Node> nodes_;
};

} // namespace terlab::ad
