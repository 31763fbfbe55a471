#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// Every operation returns a fresh tensor. When a Tape is active on the calling
// thread and at least one input requires a gradient, the operation appends a
// node to that tape; `backward` replays the tape in reverse. All kernels
// accumulate in double and round once on store.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "anyi2v/error.hpp"

namespace anyi2v {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Global switch for NaN/Inf checks after every op. Initialized from
/// ANYI2V_DEBUG_NANCHECK (on when set to "1").
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

template <typename T>
class Tape;

template <typename T>
struct TensorStorage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until a gradient is accumulated
    bool requires_grad = false;
    std::uint64_t tape_id = 0;  // nonzero when produced by a recorded op
    std::size_t tape_index = 0;

    T* grad_buffer();  // allocates a zeroed gradient on first use
};

template <typename T>
class BasicTensor {
public:
    using value_type = T;
    using Storage = TensorStorage<T>;

    BasicTensor();
    explicit BasicTensor(Shape shape, T fill = T(0));
    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static BasicTensor zeros(Shape shape) { return BasicTensor(std::move(shape)); }
    static BasicTensor full(Shape shape, T value) { return BasicTensor(std::move(shape), value); }
    static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, value); }

    const Shape& shape() const { return s_->shape; }
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return s_->shape.size(); }
    std::size_t numel() const { return s_->data.size(); }

    std::span<const T> data() const { return s_->data; }
    /// Writable view; refused for tensors that are part of a recorded graph.
    std::span<T> mutable_data();
    T item() const;
    T at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return s_->requires_grad; }
    BasicTensor& set_requires_grad(bool on);
    bool has_grad() const { return !s_->grad.empty(); }
    /// Accumulated gradient; throws when no gradient has been accumulated.
    BasicTensor grad() const;
    void zero_grad() { s_->grad.clear(); }

    /// Value copy that does not participate in any tape.
    BasicTensor detach() const;
    BasicTensor clone() const { return detach(); }

    template <typename U>
    BasicTensor<U> cast() const {
        std::vector<U> out(s_->data.begin(), s_->data.end());
        return BasicTensor<U>(s_->shape, std::move(out));
    }

    const std::shared_ptr<Storage>& storage() const { return s_; }
    bool same_storage(const BasicTensor& other) const { return s_ == other.s_; }

private:
    std::shared_ptr<Storage> s_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Ordered record of differentiable operations.
template <typename T>
class Tape {
public:
    using Storage = TensorStorage<T>;
    using BackwardFn = std::function<void(std::span<const T> grad_out)>;

    struct Node {
        std::vector<std::shared_ptr<Storage>> inputs;
        std::shared_ptr<Storage> output;
        BackwardFn backward;
        const char* op = "";
    };

    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    ~Tape();

    std::size_t size() const { return nodes_.size(); }
    const std::vector<Node>& nodes() const { return nodes_; }
    std::uint64_t id() const { return id_; }

    void record(const char* op, std::vector<std::shared_ptr<Storage>> inputs,
                const std::shared_ptr<Storage>& output, BackwardFn backward);

    /// Seeds d(loss)/d(loss) = 1 and runs every node once in reverse order.
    /// The tape is consumed: afterwards it is empty and earlier outputs are detached.
    void backward(const BasicTensor<T>& loss);

    static Tape* active();

private:
    std::vector<Node> nodes_;
    std::uint64_t id_;
};

/// Makes a tape the active one for the current thread for the scope's lifetime.
template <typename T>
class ActiveTape {
public:
    explicit ActiveTape(Tape<T>& tape);
    ActiveTape(const ActiveTape&) = delete;
    ActiveTape& operator=(const ActiveTape&) = delete;
    ~ActiveTape();

private:
    Tape<T>* previous_;
};

/// Convenience: runs backward on the thread's active tape.
template <typename T>
void backward(const BasicTensor<T>& loss);

enum class BinaryOp { Add, Sub, Mul, Div };

/// Elementwise binary op; `b` broadcasts onto the trailing dimensions of `a`
/// (each dimension equal or 1). The result has `a`'s shape.
template <typename T>
BasicTensor<T> elementwise(BinaryOp op, const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(BinaryOp::Add, a, b); }
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(BinaryOp::Sub, a, b); }
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(BinaryOp::Mul, a, b); }
template <typename T>
BasicTensor<T> div(const BasicTensor<T>& a, const BasicTensor<T>& b) { return elementwise(BinaryOp::Div, a, b); }

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor);
template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, double value);
template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a);
template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a);
/// Elementwise square root; the gradient at 0 is taken as 0.
template <typename T>
BasicTensor<T> square_root(const BasicTensor<T>& a);
/// max(a, floor) elementwise; the gradient passes where a > floor.
template <typename T>
BasicTensor<T> clamp_min(const BasicTensor<T>& a, double floor);

template <typename T>
BasicTensor<T> stop_gradient(const BasicTensor<T>& x);

/// Sum of all elements, shape {1}.
template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x);

/// Mean over `axis`, which is kept with size 1 so the result broadcasts back.
template <typename T>
BasicTensor<T> mean_along(const BasicTensor<T>& x, std::size_t axis);

/// [..., M, K] x [..., K, N]. `b` may be rank 2 and shared across the batch.
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis);

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& order);
/// Half-open range [begin, end) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis);

/// Same-padding, stride-1 convolution. x [N,C,H,W], weight [O,C,k,k] (k odd), bias [O].
template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias);
/// Group normalization without affine terms: x [N, C, ...] is normalized per
/// (sample, group of C/groups channels) using the biased variance.
template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, double eps = 1e-5);
/// 2x2 average pooling over the last two axes.
template <typename T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& x);
/// 2x nearest-neighbour upsampling over the last two axes.
template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& x);

}  // namespace anyi2v
