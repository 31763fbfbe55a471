#include "anyi2v/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace anyi2v {

namespace {

bool env_nancheck() {
    const char* v = std::getenv("ANYI2V_DEBUG_NANCHECK");
    return v != nullptr && std::string(v) == "1";
}

std::atomic<bool> g_finite_checks{env_nancheck()};
std::atomic<std::uint64_t> g_next_tape_id{1};

template <typename T>
Tape<T>*& active_slot() {
    thread_local Tape<T>* slot = nullptr;
    return slot;
}

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <typename T>
StoragePtr<T> make_storage(Shape shape, std::vector<T> data) {
    auto s = std::make_shared<TensorStorage<T>>();
    s->shape = std::move(shape);
    s->data = std::move(data);
    return s;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
    if (!g_finite_checks.load(std::memory_order_relaxed)) return;
    for (T x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
    }
}

// Wraps a freshly computed result, recording it on the active tape when any
// input participates in differentiation.
template <typename T>
BasicTensor<T> finish(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const BasicTensor<T>*> inputs,
                      typename Tape<T>::BackwardFn backward) {
    check_finite(data, op);
    BasicTensor<T> out(std::move(shape), std::move(data));
    Tape<T>* tape = Tape<T>::active();
    if (tape == nullptr || !backward) return out;
    bool any = false;
    std::vector<StoragePtr<T>> in;
    for (const auto* t : inputs) {
        in.push_back(t->storage());
        any = any || t->requires_grad();
    }
    if (!any) return out;
    out.set_requires_grad(true);
    tape->record(op, std::move(in), out.storage(), std::move(backward));
    return out;
}

template <typename T>
bool wants_grad(const StoragePtr<T>& s) {
    return s->requires_grad;
}

// Index map from every element of `a` to the broadcast element of `b`.
std::vector<std::size_t> broadcast_map(const Shape& a, const Shape& b) {
    if (b.size() > a.size()) {
        throw ShapeError("cannot broadcast " + to_string(b) + " onto " + to_string(a));
    }
    const std::size_t offset = a.size() - b.size();
    std::vector<std::size_t> bstride(a.size(), 0);
    std::size_t stride = 1;
    for (std::size_t i = b.size(); i-- > 0;) {
        const std::size_t ad = a[offset + i];
        if (b[i] != ad && b[i] != 1) {
            throw ShapeError("cannot broadcast " + to_string(b) + " onto " + to_string(a));
        }
        bstride[offset + i] = b[i] == 1 ? 0 : stride;
        stride *= b[i];
    }
    const std::size_t n = numel(a);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> counter(a.size(), 0);
    std::size_t bi = 0;
    for (std::size_t i = 0; i < n; ++i) {
        map[i] = bi;
        for (std::size_t d = a.size(); d-- > 0;) {
            if (++counter[d] < a[d]) {
                bi += bstride[d];
                break;
            }
            bi -= bstride[d] * (a[d] - 1);
            counter[d] = 0;
        }
    }
    return map;
}

std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> st(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) st[i - 1] = st[i] * shape[i];
    return st;
}

struct AxisSplit {
    std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

void rethrow_with_context(const std::string& context) {
    try {
        throw;
    } catch (const NumericError& e) {
        throw NumericError(context + ": " + e.what());
    } catch (const ShapeError& e) {
        throw ShapeError(context + ": " + e.what());
    } catch (const InputError& e) {
        throw InputError(context + ": " + e.what());
    } catch (const std::exception& e) {
        throw Error(context + ": " + e.what());
    }
}

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

template <typename T>
T* TensorStorage<T>::grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
}

// ---------------------------------------------------------------------------
// BasicTensor

template <typename T>
BasicTensor<T>::BasicTensor() : s_(make_storage<T>(Shape{1}, std::vector<T>(1, T(0)))) {}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) {
    const std::size_t n = anyi2v::numel(shape);
    s_ = make_storage<T>(std::move(shape), std::vector<T>(n, fill));
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) {
    if (anyi2v::numel(shape) != data.size()) {
        throw ShapeError("shape " + to_string(shape) + " does not match " + std::to_string(data.size()) +
                         " values");
    }
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("zero-sized dimension in " + to_string(shape));
    }
    s_ = make_storage<T>(std::move(shape), std::move(data));
    s_->requires_grad = requires_grad;
}

template <typename T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    return s_->shape[axis];
}

template <typename T>
std::span<T> BasicTensor<T>::mutable_data() {
    if (s_->tape_id != 0) throw Error("cannot mutate a tensor recorded on a tape");
    return s_->data;
}

template <typename T>
T BasicTensor<T>::item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return s_->data[0];
}

template <typename T>
T BasicTensor<T>::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw ShapeError("index rank mismatch for " + to_string(shape()));
    std::size_t flat = 0;
    std::size_t i = 0;
    for (std::size_t v : index) {
        if (v >= s_->shape[i]) throw ShapeError("index out of range for " + to_string(shape()));
        flat = flat * s_->shape[i] + v;
        ++i;
    }
    return s_->data[flat];
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
}

template <typename T>
BasicTensor<T> BasicTensor<T>::grad() const {
    if (s_->grad.empty()) throw Error("tensor has no accumulated gradient");
    return BasicTensor<T>(s_->shape, s_->grad);
}

template <typename T>
BasicTensor<T> BasicTensor<T>::detach() const {
    return BasicTensor<T>(s_->shape, s_->data);
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Tape<T>::Tape() : id_(g_next_tape_id.fetch_add(1)) {}

template <typename T>
Tape<T>::~Tape() {
    if (active_slot<T>() == this) active_slot<T>() = nullptr;
}

template <typename T>
Tape<T>* Tape<T>::active() {
    return active_slot<T>();
}

template <typename T>
void Tape<T>::record(const char* op, std::vector<std::shared_ptr<Storage>> inputs,
                     const std::shared_ptr<Storage>& output, BackwardFn backward) {
    output->tape_id = id_;
    output->tape_index = nodes_.size();
    nodes_.push_back(Node{std::move(inputs), output, std::move(backward), op});
}

template <typename T>
void Tape<T>::backward(const BasicTensor<T>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + to_string(loss.shape()));
    const auto& ls = loss.storage();
    if (ls->tape_id != id_ || ls->tape_index >= nodes_.size() || nodes_[ls->tape_index].output != ls) {
        throw Error("backward on a loss that was not produced under this tape");
    }
    ls->grad_buffer()[0] += T(1);
    for (std::size_t i = ls->tape_index + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.output->grad.empty()) {
            node.backward(node.output->grad);
            check_finite(node.output->grad, node.op);
        }
    }
    // Interior gradients are released; only leaves keep theirs.
    for (Node& node : nodes_) {
        node.output->grad.clear();
        node.output->tape_id = 0;
    }
    nodes_.clear();
    id_ = g_next_tape_id.fetch_add(1);
}

template <typename T>
ActiveTape<T>::ActiveTape(Tape<T>& tape) : previous_(active_slot<T>()) {
    active_slot<T>() = &tape;
}

template <typename T>
ActiveTape<T>::~ActiveTape() {
    active_slot<T>() = previous_;
}

template <typename T>
void backward(const BasicTensor<T>& loss) {
    Tape<T>* tape = Tape<T>::active();
    if (tape == nullptr) throw Error("backward called without an active tape");
    tape->backward(loss);
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
BasicTensor<T> elementwise(BinaryOp op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
    const bool same = a.shape() == b.shape();
    std::vector<std::size_t> map;
    if (!same) map = broadcast_map(a.shape(), b.shape());
    const std::size_t n = a.numel();
    auto bidx = [&](std::size_t i) { return same ? i : map[i]; };
    const auto av = a.data();
    const auto bv = b.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[i];
        const double y = bv[bidx(i)];
        double r = 0;
        switch (op) {
            case BinaryOp::Add: r = x + y; break;
            case BinaryOp::Sub: r = x - y; break;
            case BinaryOp::Mul: r = x * y; break;
            case BinaryOp::Div: r = x / y; break;
        }
        out[i] = static_cast<T>(r);
    }
    auto as = a.storage();
    auto bs = b.storage();
    static constexpr const char* names[] = {"add", "sub", "mul", "div"};
    return finish<T>(names[static_cast<int>(op)], a.shape(), std::move(out), {&a, &b},
                     [op, as, bs, map = std::move(map), same](std::span<const T> g) {
                         const std::size_t n = g.size();
                         auto bidx = [&](std::size_t i) { return same ? i : map[i]; };
                         if (wants_grad(as)) {
                             T* ga = as->grad_buffer();
                             for (std::size_t i = 0; i < n; ++i) {
                                 double d = g[i];
                                 if (op == BinaryOp::Mul) d *= bs->data[bidx(i)];
                                 if (op == BinaryOp::Div) d /= bs->data[bidx(i)];
                                 ga[i] = static_cast<T>(ga[i] + d);
                             }
                         }
                         if (wants_grad(bs)) {
                             std::vector<double> acc(bs->data.size(), 0.0);
                             for (std::size_t i = 0; i < n; ++i) {
                                 const std::size_t j = bidx(i);
                                 double d = g[i];
                                 switch (op) {
                                     case BinaryOp::Add: break;
                                     case BinaryOp::Sub: d = -d; break;
                                     case BinaryOp::Mul: d *= as->data[i]; break;
                                     case BinaryOp::Div: {
                                         const double y = bs->data[j];
                                         d = -d * as->data[i] / (y * y);
                                         break;
                                     }
                                 }
                                 acc[j] += d;
                             }
                             T* gb = bs->grad_buffer();
                             for (std::size_t j = 0; j < acc.size(); ++j) gb[j] = static_cast<T>(gb[j] + acc[j]);
                         }
                     });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(av[i] * factor);
    auto as = a.storage();
    return finish<T>("scale", a.shape(), std::move(out), {&a}, [as, factor](std::span<const T> g) {
        T* ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = static_cast<T>(ga[i] + g[i] * factor);
    });
}

template <typename T>
BasicTensor<T> add_scalar(const BasicTensor<T>& a, double value) {
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(av[i] + value);
    auto as = a.storage();
    return finish<T>("add_scalar", a.shape(), std::move(out), {&a}, [as](std::span<const T> g) {
        T* ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

template <typename T>
BasicTensor<T> square(const BasicTensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(double(av[i]) * av[i]);
    auto as = a.storage();
    return finish<T>("square", a.shape(), std::move(out), {&a}, [as](std::span<const T> g) {
        T* ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = static_cast<T>(ga[i] + 2.0 * as->data[i] * g[i]);
    });
}

template <typename T>
BasicTensor<T> square_root(const BasicTensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (av[i] < T(0)) throw NumericError("square_root of negative value " + std::to_string(av[i]));
        out[i] = static_cast<T>(std::sqrt(double(av[i])));
    }
    auto as = a.storage();
    return finish<T>("square_root", a.shape(), std::move(out), {&a}, [as](std::span<const T> g) {
        T* ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double r = std::sqrt(double(as->data[i]));
            if (r > 0.0) ga[i] = static_cast<T>(ga[i] + g[i] * 0.5 / r);
        }
    });
}

template <typename T>
BasicTensor<T> clamp_min(const BasicTensor<T>& a, double floor) {
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > floor ? av[i] : static_cast<T>(floor);
    auto as = a.storage();
    return finish<T>("clamp_min", a.shape(), std::move(out), {&a}, [as, floor](std::span<const T> g) {
        T* ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (as->data[i] > floor) ga[i] += g[i];
        }
    });
}

template <typename T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
    std::vector<T> out(a.numel());
    const auto av = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av[i];
        out[i] = static_cast<T>(x / (1.0 + std::exp(-x)));
    }
    auto as = a.storage();
    return finish<T>("silu", a.shape(), std::move(out), {&a}, [as](std::span<const T> g) {
        T* ga = as->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = as->data[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            ga[i] = static_cast<T>(ga[i] + g[i] * s * (1.0 + x * (1.0 - s)));
        }
    });
}

template <typename T>
BasicTensor<T> stop_gradient(const BasicTensor<T>& x) {
    return x.detach();
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
    double acc = 0;
    for (T v : x.data()) acc += v;
    auto xs = x.storage();
    return finish<T>("sum", Shape{1}, std::vector<T>{static_cast<T>(acc)}, {&x}, [xs](std::span<const T> g) {
        T* gx = xs->grad_buffer();
        const T g0 = g[0];
        for (std::size_t i = 0; i < xs->data.size(); ++i) gx[i] += g0;
    });
}

// ---------------------------------------------------------------------------
// Matmul

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

template <typename T>
void widen(const T* src, std::size_t n, std::vector<double>& dst) {
    dst.resize(n);
    for (std::size_t i = 0; i < n; ++i) dst[i] = src[i];
}

template <typename T>
void accumulate_into(T* dst, const double* src, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<T>(dst[i] + src[i]);
}

}  // namespace

template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2) throw ShapeError("matmul needs rank >= 2 operands");
    const std::size_t M = a.shape()[a.rank() - 2];
    const std::size_t K = a.shape()[a.rank() - 1];
    const std::size_t K2 = b.shape()[b.rank() - 2];
    const std::size_t N = b.shape()[b.rank() - 1];
    if (K != K2) {
        throw ShapeError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const Shape abatch(a.shape().begin(), a.shape().end() - 2);
    const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
    const bool shared = bbatch.empty();
    if (!shared && abatch != bbatch) {
        throw ShapeError("matmul batch dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    const std::size_t batch = numel(abatch);
    Shape oshape = abatch;
    oshape.push_back(M);
    oshape.push_back(N);

    std::vector<T> out(batch * M * N);
    std::vector<double> A, B, C(M * N);
    widen(a.data().data(), a.numel(), A);
    widen(b.data().data(), b.numel(), B);
    for (std::size_t p = 0; p < batch; ++p) {
        const ConstRowMap Am(A.data() + p * M * K, Eigen::Index(M), Eigen::Index(K));
        const ConstRowMap Bm(B.data() + (shared ? 0 : p * K * N), Eigen::Index(K), Eigen::Index(N));
        RowMap Cm(C.data(), Eigen::Index(M), Eigen::Index(N));
        Cm.noalias() = Am * Bm;
        T* o = out.data() + p * M * N;
        for (std::size_t i = 0; i < M * N; ++i) o[i] = static_cast<T>(C[i]);
    }
    auto as = a.storage();
    auto bs = b.storage();
    return finish<T>("matmul", std::move(oshape), std::move(out), {&a, &b},
                     [as, bs, batch, M, K, N, shared](std::span<const T> g) {
                         std::vector<double> A, B, G;
                         widen(g.data(), g.size(), G);
                         if (wants_grad(as)) {
                             widen(bs->data.data(), bs->data.size(), B);
                             std::vector<double> acc(M * K);
                             T* ga = as->grad_buffer();
                             for (std::size_t p = 0; p < batch; ++p) {
                                 const ConstRowMap Gm(G.data() + p * M * N, Eigen::Index(M), Eigen::Index(N));
                                 const ConstRowMap Bm(B.data() + (shared ? 0 : p * K * N), Eigen::Index(K),
                                                      Eigen::Index(N));
                                 RowMap Am(acc.data(), Eigen::Index(M), Eigen::Index(K));
                                 Am.noalias() = Gm * Bm.transpose();
                                 accumulate_into(ga + p * M * K, acc.data(), M * K);
                             }
                         }
                         if (wants_grad(bs)) {
                             widen(as->data.data(), as->data.size(), A);
                             std::vector<double> acc(bs->data.size(), 0.0);
                             for (std::size_t p = 0; p < batch; ++p) {
                                 const ConstRowMap Gm(G.data() + p * M * N, Eigen::Index(M), Eigen::Index(N));
                                 const ConstRowMap Am(A.data() + p * M * K, Eigen::Index(M), Eigen::Index(K));
                                 RowMap Bm(acc.data() + (shared ? 0 : p * K * N), Eigen::Index(K), Eigen::Index(N));
                                 Bm.noalias() += Am.transpose() * Gm;
                             }
                             accumulate_into(bs->grad_buffer(), acc.data(), acc.size());
                         }
                     });
}

// ---------------------------------------------------------------------------
// Softmax

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax axis out of range for " + to_string(x.shape()));
    const AxisSplit s = split_at(x.shape(), axis);
    const auto xv = x.data();
    std::vector<T> out(x.numel());
    std::vector<double> e(s.len);
    if (s.inner == 1) {
        for (std::size_t o = 0; o < s.outer; ++o) {
            const T* src = xv.data() + o * s.len;
            T* dst = out.data() + o * s.len;
            const double mx = *std::max_element(src, src + s.len);
            double z = 0;
            for (std::size_t l = 0; l < s.len; ++l) {
                e[l] = std::exp(static_cast<T>(src[l] - mx));
                z += e[l];
            }
            const double iz = 1.0 / z;
            for (std::size_t l = 0; l < s.len; ++l) dst[l] = static_cast<T>(e[l] * iz);
        }
    }
    for (std::size_t o = 0; s.inner != 1 && o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double mx = -INFINITY;
            for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, double(xv[base + l * s.inner]));
            double z = 0;
            for (std::size_t l = 0; l < s.len; ++l) {
                e[l] = std::exp(double(xv[base + l * s.inner]) - mx);
                z += e[l];
            }
            for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = static_cast<T>(e[l] / z);
        }
    }
    auto xs = x.storage();
    std::vector<T> y = out;
    return finish<T>("softmax", x.shape(), std::move(out), {&x},
                     [xs, s, y = std::move(y)](std::span<const T> g) {
                         T* gx = xs->grad_buffer();
                         for (std::size_t o = 0; o < s.outer; ++o) {
                             for (std::size_t in = 0; in < s.inner; ++in) {
                                 const std::size_t base = o * s.len * s.inner + in;
                                 double dot = 0;
                                 for (std::size_t l = 0; l < s.len; ++l) {
                                     const std::size_t i = base + l * s.inner;
                                     dot += double(g[i]) * y[i];
                                 }
                                 for (std::size_t l = 0; l < s.len; ++l) {
                                     const std::size_t i = base + l * s.inner;
                                     gx[i] = static_cast<T>(gx[i] + double(y[i]) * (double(g[i]) - dot));
                                 }
                             }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Layout

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    }
    std::vector<T> out(x.data().begin(), x.data().end());
    auto xs = x.storage();
    return finish<T>("reshape", std::move(shape), std::move(out), {&x}, [xs](std::span<const T> g) {
        T* gx = xs->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& x, const std::vector<std::size_t>& order) {
    const std::size_t r = x.rank();
    if (order.size() != r) throw ShapeError("permute order has wrong rank");
    std::vector<bool> seen(r, false);
    for (std::size_t o : order) {
        if (o >= r || seen[o]) throw ShapeError("permute order is not a permutation");
        seen[o] = true;
    }
    Shape oshape(r);
    for (std::size_t i = 0; i < r; ++i) oshape[i] = x.shape()[order[i]];
    const auto istr = strides_of(x.shape());
    // Source index for each output element.
    const std::size_t n = x.numel();
    std::vector<std::size_t> src(n);
    std::vector<std::size_t> counter(r, 0);
    std::size_t si = 0;
    for (std::size_t i = 0; i < n; ++i) {
        src[i] = si;
        for (std::size_t d = r; d-- > 0;) {
            const std::size_t st = istr[order[d]];
            if (++counter[d] < oshape[d]) {
                si += st;
                break;
            }
            si -= st * (oshape[d] - 1);
            counter[d] = 0;
        }
    }
    const auto xv = x.data();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = xv[src[i]];
    auto xs = x.storage();
    return finish<T>("permute", std::move(oshape), std::move(out), {&x},
                     [xs, src = std::move(src)](std::span<const T> g) {
                         T* gx = xs->grad_buffer();
                         for (std::size_t i = 0; i < g.size(); ++i) gx[src[i]] += g[i];
                     });
}

template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank()) throw ShapeError("slice axis out of range for " + to_string(x.shape()));
    if (begin >= end || end > x.shape()[axis]) {
        throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                         std::to_string(axis) + " of " + to_string(x.shape()));
    }
    const AxisSplit s = split_at(x.shape(), axis);
    const std::size_t len = end - begin;
    Shape oshape = x.shape();
    oshape[axis] = len;
    std::vector<T> out(s.outer * len * s.inner);
    const auto xv = x.data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = xv.data() + (o * s.len + begin) * s.inner;
        std::copy(src, src + len * s.inner, out.begin() + o * len * s.inner);
    }
    auto xs = x.storage();
    return finish<T>("slice", std::move(oshape), std::move(out), {&x},
                     [xs, s, begin, len](std::span<const T> g) {
                         T* gx = xs->grad_buffer();
                         for (std::size_t o = 0; o < s.outer; ++o) {
                             T* dst = gx + (o * s.len + begin) * s.inner;
                             const T* src = g.data() + o * len * s.inner;
                             for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
                         }
                     });
}

template <typename T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range");
    Shape oshape = first;
    oshape[axis] = 0;
    for (const auto& p : parts) {
        Shape a = p.shape();
        Shape b = first;
        if (a.size() != b.size()) throw ShapeError("concat rank mismatch");
        a[axis] = b[axis] = 0;
        if (a != b) throw ShapeError("concat shape mismatch: " + to_string(p.shape()) + " vs " + to_string(first));
        oshape[axis] += p.shape()[axis];
    }
    const AxisSplit os = split_at(oshape, axis);
    std::vector<T> out(numel(oshape));
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> lens;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t len = p.shape()[axis];
        const auto pv = p.data();
        for (std::size_t o = 0; o < os.outer; ++o) {
            std::copy(pv.begin() + o * len * os.inner, pv.begin() + (o + 1) * len * os.inner,
                      out.begin() + (o * os.len + off) * os.inner);
        }
        offsets.push_back(off);
        lens.push_back(len);
        off += len;
    }
    std::vector<std::shared_ptr<TensorStorage<T>>> stores;
    bool any = false;
    for (const auto& p : parts) {
        stores.push_back(p.storage());
        any = any || p.requires_grad();
    }
    check_finite(out, "concat");
    BasicTensor<T> result(std::move(oshape), std::move(out));
    Tape<T>* tape = Tape<T>::active();
    if (tape == nullptr || !any) return result;
    result.set_requires_grad(true);
    auto inputs = stores;
    tape->record("concat", std::move(inputs), result.storage(),
                 [stores, offsets, lens, os](std::span<const T> g) {
                     for (std::size_t k = 0; k < stores.size(); ++k) {
                         if (!stores[k]->requires_grad) continue;
                         T* gp = stores[k]->grad_buffer();
                         const std::size_t len = lens[k];
                         for (std::size_t o = 0; o < os.outer; ++o) {
                             const T* src = g.data() + (o * os.len + offsets[k]) * os.inner;
                             T* dst = gp + o * len * os.inner;
                             for (std::size_t i = 0; i < len * os.inner; ++i) dst[i] += src[i];
                         }
                     }
                 });
    return result;
}

// ---------------------------------------------------------------------------
// Spatial kernels

namespace {

// im2col for one image: col[(c*k + ky)*k + kx][y*W + x].
template <typename T>
void im2col(const T* img, std::size_t C, std::size_t H, std::size_t W, std::size_t k, std::vector<double>& col) {
    const long pad = static_cast<long>(k / 2);
    col.assign(C * k * k * H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = col.data() + ((c * k + ky) * k + kx) * H * W;
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                    if (sy < 0 || sy >= static_cast<long>(H)) continue;
                    for (std::size_t x = 0; x < W; ++x) {
                        const long sx = static_cast<long>(x) + static_cast<long>(kx) - pad;
                        if (sx < 0 || sx >= static_cast<long>(W)) continue;
                        row[y * W + x] = img[(c * H + sy) * W + sx];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const std::vector<double>& col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                T* img) {
    const long pad = static_cast<long>(k / 2);
    std::vector<double> acc(C * H * W, 0.0);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = col.data() + ((c * k + ky) * k + kx) * H * W;
                for (std::size_t y = 0; y < H; ++y) {
                    const long sy = static_cast<long>(y) + static_cast<long>(ky) - pad;
                    if (sy < 0 || sy >= static_cast<long>(H)) continue;
                    for (std::size_t x = 0; x < W; ++x) {
                        const long sx = static_cast<long>(x) + static_cast<long>(kx) - pad;
                        if (sx < 0 || sx >= static_cast<long>(W)) continue;
                        acc[(c * H + sy) * W + sx] += row[y * W + x];
                    }
                }
            }
        }
    }
    accumulate_into(img, acc.data(), acc.size());
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
    if (x.rank() != 4 || weight.rank() != 4) throw ShapeError("conv2d expects rank-4 input and weight");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != C || weight.dim(3) != k || k % 2 == 0) {
        throw ShapeError("conv2d weight " + to_string(weight.shape()) + " incompatible with input " +
                         to_string(x.shape()));
    }
    if (bias.numel() != O) throw ShapeError("conv2d bias size mismatch");
    const std::size_t R = C * k * k;
    const std::size_t P = H * W;
    std::vector<T> out(N * O * P);
    std::vector<double> col, Wd, acc(O * P);
    widen(weight.data().data(), weight.numel(), Wd);
    const ConstRowMap Wm(Wd.data(), Eigen::Index(O), Eigen::Index(R));
    const T* bv = bias.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        im2col(x.data().data() + n * C * P, C, H, W, k, col);
        const ConstRowMap Cm(col.data(), Eigen::Index(R), Eigen::Index(P));
        RowMap Om(acc.data(), Eigen::Index(O), Eigen::Index(P));
        Om.noalias() = Wm * Cm;
        T* dst = out.data() + n * O * P;
        for (std::size_t o = 0; o < O; ++o) {
            for (std::size_t p = 0; p < P; ++p) dst[o * P + p] = static_cast<T>(acc[o * P + p] + double(bv[o]));
        }
    }
    auto xs = x.storage();
    auto ws = weight.storage();
    auto bs = bias.storage();
    return finish<T>("conv2d", Shape{N, O, H, W}, std::move(out), {&x, &weight, &bias},
                     [xs, ws, bs, N, C, H, W, O, k, R, P](std::span<const T> g) {
                         std::vector<double> col, gcol, Wd, G;
                         std::vector<double> gw(wants_grad(ws) ? O * R : 0, 0.0);
                         std::vector<double> gb(O, 0.0);
                         widen(ws->data.data(), ws->data.size(), Wd);
                         const ConstRowMap Wm(Wd.data(), Eigen::Index(O), Eigen::Index(R));
                         for (std::size_t n = 0; n < N; ++n) {
                             widen(g.data() + n * O * P, O * P, G);
                             const ConstRowMap Gm(G.data(), Eigen::Index(O), Eigen::Index(P));
                             if (wants_grad(bs)) {
                                 for (std::size_t o = 0; o < O; ++o) {
                                     double s = 0;
                                     for (std::size_t p = 0; p < P; ++p) s += G[o * P + p];
                                     gb[o] += s;
                                 }
                             }
                             if (wants_grad(ws)) {
                                 im2col(xs->data.data() + n * C * P, C, H, W, k, col);
                                 const ConstRowMap Cm(col.data(), Eigen::Index(R), Eigen::Index(P));
                                 RowMap GWm(gw.data(), Eigen::Index(O), Eigen::Index(R));
                                 GWm.noalias() += Gm * Cm.transpose();
                             }
                             if (wants_grad(xs)) {
                                 gcol.resize(R * P);
                                 RowMap GCm(gcol.data(), Eigen::Index(R), Eigen::Index(P));
                                 GCm.noalias() = Wm.transpose() * Gm;
                                 col2im_add(gcol, C, H, W, k, xs->grad_buffer() + n * C * P);
                             }
                         }
                         if (wants_grad(ws)) accumulate_into(ws->grad_buffer(), gw.data(), gw.size());
                         if (wants_grad(bs)) accumulate_into(bs->grad_buffer(), gb.data(), gb.size());
                     });
}

template <typename T>
BasicTensor<T> group_norm(const BasicTensor<T>& x, std::size_t groups, double eps) {
    if (x.rank() < 2) throw ShapeError("group_norm needs rank >= 2");
    const std::size_t N = x.dim(0), C = x.dim(1);
    if (groups == 0 || C % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
    const std::size_t span = (x.numel() / (N * C)) * (C / groups);
    const std::size_t count = N * groups;
    std::vector<T> out(x.numel());
    std::vector<double> inv_std(count);
    const auto xv = x.data();
    for (std::size_t g = 0; g < count; ++g) {
        const T* src = xv.data() + g * span;
        double mean = 0;
        for (std::size_t i = 0; i < span; ++i) mean += src[i];
        mean /= double(span);
        double var = 0;
        for (std::size_t i = 0; i < span; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= double(span);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[g] = is;
        for (std::size_t i = 0; i < span; ++i) out[g * span + i] = static_cast<T>((src[i] - mean) * is);
    }
    auto xs = x.storage();
    std::vector<T> y = out;
    return finish<T>("group_norm", x.shape(), std::move(out), {&x},
                     [xs, y = std::move(y), inv_std = std::move(inv_std), span, count](std::span<const T> g) {
                         T* gx = xs->grad_buffer();
                         for (std::size_t k = 0; k < count; ++k) {
                             const T* gk = g.data() + k * span;
                             const T* yk = y.data() + k * span;
                             double mg = 0, mgy = 0;
                             for (std::size_t i = 0; i < span; ++i) {
                                 mg += gk[i];
                                 mgy += double(gk[i]) * yk[i];
                             }
                             mg /= double(span);
                             mgy /= double(span);
                             for (std::size_t i = 0; i < span; ++i) {
                                 T& dst = gx[k * span + i];
                                 dst = static_cast<T>(dst + inv_std[k] * (double(gk[i]) - mg - double(yk[i]) * mgy));
                             }
                         }
                     });
}

template <typename T>
BasicTensor<T> avg_pool2(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("avg_pool2 needs rank >= 2");
    const std::size_t H = x.shape()[x.rank() - 2], W = x.shape()[x.rank() - 1];
    if (H % 2 != 0 || W % 2 != 0) throw ShapeError("avg_pool2 needs even spatial dims, got " + to_string(x.shape()));
    const std::size_t planes = x.numel() / (H * W);
    const std::size_t h = H / 2, w = W / 2;
    Shape oshape = x.shape();
    oshape[oshape.size() - 2] = h;
    oshape[oshape.size() - 1] = w;
    std::vector<T> out(planes * h * w);
    const auto xv = x.data();
    for (std::size_t pl = 0; pl < planes; ++pl) {
        const T* src = xv.data() + pl * H * W;
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t c = 0; c < w; ++c) {
                const double s = double(src[2 * y * W + 2 * c]) + src[2 * y * W + 2 * c + 1] +
                                 src[(2 * y + 1) * W + 2 * c] + src[(2 * y + 1) * W + 2 * c + 1];
                out[(pl * h + y) * w + c] = static_cast<T>(0.25 * s);
            }
        }
    }
    auto xs = x.storage();
    return finish<T>("avg_pool2", std::move(oshape), std::move(out), {&x},
                     [xs, planes, H, W, h, w](std::span<const T> g) {
                         T* gx = xs->grad_buffer();
                         for (std::size_t pl = 0; pl < planes; ++pl) {
                             for (std::size_t y = 0; y < H; ++y) {
                                 for (std::size_t c = 0; c < W; ++c) {
                                     T& dst = gx[(pl * H + y) * W + c];
                                     dst = static_cast<T>(dst + 0.25 * g[(pl * h + y / 2) * w + c / 2]);
                                 }
                             }
                         }
                     });
}

template <typename T>
BasicTensor<T> upsample2(const BasicTensor<T>& x) {
    if (x.rank() < 2) throw ShapeError("upsample2 needs rank >= 2");
    const std::size_t h = x.shape()[x.rank() - 2], w = x.shape()[x.rank() - 1];
    const std::size_t planes = x.numel() / (h * w);
    const std::size_t H = 2 * h, W = 2 * w;
    Shape oshape = x.shape();
    oshape[oshape.size() - 2] = H;
    oshape[oshape.size() - 1] = W;
    std::vector<T> out(planes * H * W);
    const auto xv = x.data();
    for (std::size_t pl = 0; pl < planes; ++pl) {
        for (std::size_t y = 0; y < H; ++y) {
            for (std::size_t c = 0; c < W; ++c) out[(pl * H + y) * W + c] = xv[(pl * h + y / 2) * w + c / 2];
        }
    }
    auto xs = x.storage();
    return finish<T>("upsample2", std::move(oshape), std::move(out), {&x},
                     [xs, planes, H, W, h, w](std::span<const T> g) {
                         T* gx = xs->grad_buffer();
                         std::vector<double> acc(planes * h * w, 0.0);
                         for (std::size_t pl = 0; pl < planes; ++pl) {
                             for (std::size_t y = 0; y < H; ++y) {
                                 for (std::size_t c = 0; c < W; ++c) {
                                     acc[(pl * h + y / 2) * w + c / 2] += g[(pl * H + y) * W + c];
                                 }
                             }
                         }
                         for (std::size_t i = 0; i < acc.size(); ++i) gx[i] = static_cast<T>(gx[i] + acc[i]);
                     });
}

template <typename T>
BasicTensor<T> mean_along(const BasicTensor<T>& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("mean_along: axis " + std::to_string(axis) + " out of range for " + to_string(x.shape()));
    const AxisSplit s = split_at(x.shape(), axis);
    Shape shape = x.shape();
    shape[axis] = 1;
    const auto xv = x.data();
    std::vector<T> out(s.outer * s.inner);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
            double acc = 0.0;
            for (std::size_t l = 0; l < s.len; ++l) acc += xv[(o * s.len + l) * s.inner + in];
            out[o * s.inner + in] = static_cast<T>(acc / double(s.len));
        }
    }
    auto xs = x.storage();
    return finish<T>("mean_along", shape, std::move(out), {&x}, [xs, s](std::span<const T> g) {
        T* gx = xs->grad_buffer();
        const double inv = 1.0 / double(s.len);
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t l = 0; l < s.len; ++l) {
                for (std::size_t in = 0; in < s.inner; ++in) {
                    T& dst = gx[(o * s.len + l) * s.inner + in];
                    dst = static_cast<T>(dst + g[o * s.inner + in] * inv);
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------

#define ANYI2V_INSTANTIATE(T)                                                                               \
    template struct TensorStorage<T>;                                                                       \
    template class BasicTensor<T>;                                                                          \
    template class Tape<T>;                                                                                 \
    template class ActiveTape<T>;                                                                           \
    template void backward<T>(const BasicTensor<T>&);                                                       \
    template BasicTensor<T> elementwise<T>(BinaryOp, const BasicTensor<T>&, const BasicTensor<T>&);         \
    template BasicTensor<T> scale<T>(const BasicTensor<T>&, double);                                        \
    template BasicTensor<T> add_scalar<T>(const BasicTensor<T>&, double);                                   \
    template BasicTensor<T> square<T>(const BasicTensor<T>&);                                               \
    template BasicTensor<T> silu<T>(const BasicTensor<T>&);                                                 \
    template BasicTensor<T> square_root<T>(const BasicTensor<T>&);                                          \
    template BasicTensor<T> clamp_min<T>(const BasicTensor<T>&, double);                                    \
    template BasicTensor<T> mean_along<T>(const BasicTensor<T>&, std::size_t);                              \
    template BasicTensor<T> stop_gradient<T>(const BasicTensor<T>&);                                        \
    template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                                  \
    template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);                        \
    template BasicTensor<T> softmax<T>(const BasicTensor<T>&, std::size_t);                                 \
    template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                                       \
    template BasicTensor<T> permute<T>(const BasicTensor<T>&, const std::vector<std::size_t>&);            \
    template BasicTensor<T> slice<T>(const BasicTensor<T>&, std::size_t, std::size_t, std::size_t);         \
    template BasicTensor<T> concat<T>(const std::vector<BasicTensor<T>>&, std::size_t);                     \
    template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&); \
    template BasicTensor<T> group_norm<T>(const BasicTensor<T>&, std::size_t, double);                     \
    template BasicTensor<T> avg_pool2<T>(const BasicTensor<T>&);                                            \
    template BasicTensor<T> upsample2<T>(const BasicTensor<T>&);

ANYI2V_INSTANTIATE(float)
ANYI2V_INSTANTIATE(double)

}  // namespace anyi2v
