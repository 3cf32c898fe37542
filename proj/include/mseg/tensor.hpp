#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mseg {

using Index = std::ptrdiff_t;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape)
{
    Index n = 1;
    for (Index e : shape) {
        n *= e;
    }
    return n;
}

std::string shape_string(const Shape& shape);

/// Dense row-major array with an optional gradient slot.
///
/// Storage is a contiguous Eigen column array so kernels can Map it as
/// whatever matrix view they need. A rank-4 activation is laid out
/// [channel][depth][height][width] with width fastest.
template <typename Scalar>
class Tensor {
public:
    using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape))
    {
        check_extents();
        data_ = Buffer::Zero(numel(shape_));
    }

    Tensor(Shape shape, Buffer data)
        : shape_(std::move(shape))
        , data_(std::move(data))
    {
        check_extents();
        if (data_.size() != numel(shape_)) {
            throw std::invalid_argument("tensor data length " + std::to_string(data_.size())
                                        + " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, Scalar value)
    {
        Tensor t(std::move(shape));
        t.data_.setConstant(value);
        return t;
    }

    const Shape& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index extent(Index axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
    Index size() const { return data_.size(); }

    Buffer& data() { return data_; }
    const Buffer& data() const { return data_; }
    Scalar* ptr() { return data_.data(); }
    const Scalar* ptr() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    bool requires_grad() const { return requires_grad_; }
    void set_requires_grad(bool flag) { requires_grad_ = flag; }

    bool has_grad() const { return grad_.size() == data_.size() && has_grad_; }

    Buffer& grad() { return grad_; }
    const Buffer& grad() const { return grad_; }

    /// Allocates a zero gradient if none is present.
    Buffer& ensure_grad()
    {
        if (!has_grad()) {
            grad_ = Buffer::Zero(data_.size());
            has_grad_ = true;
        }
        return grad_;
    }

    void clear_grad()
    {
        grad_.resize(0);
        has_grad_ = false;
    }

private:
    void check_extents() const
    {
        for (Index e : shape_) {
            if (e < 0) {
                throw std::invalid_argument("negative extent in shape " + shape_string(shape_));
            }
        }
    }

    Shape shape_;
    Buffer data_;
    Buffer grad_;
    bool requires_grad_ = false;
    bool has_grad_ = false;
};

/// Graph handle. Operations record against shared nodes so the tape can
/// route gradients back to the exact tensors that produced an output.
template <typename Scalar>
using Var = std::shared_ptr<Tensor<Scalar>>;

template <typename Scalar>
Var<Scalar> make_var(Tensor<Scalar> value, bool requires_grad = false)
{
    auto v = std::make_shared<Tensor<Scalar>>(std::move(value));
    v->set_requires_grad(requires_grad);
    return v;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t)
{
    return Tensor<To>(t.shape(), t.data().template cast<To>());
}

/// Ordered collection of uniquely named parameter tensors.
///
/// Copies are deep: a copied set never aliases the source's storage, so a
/// snapshot taken before training stays frozen.
template <typename Scalar>
class ParameterSet {
public:
    struct Entry {
        std::string name;
        Var<Scalar> var;
    };

    ParameterSet() = default;
    ParameterSet(const ParameterSet& other) { copy_from(other); }
    ParameterSet& operator=(const ParameterSet& other)
    {
        if (this != &other) {
            entries_.clear();
            copy_from(other);
        }
        return *this;
    }
    ParameterSet(ParameterSet&&) noexcept = default;
    ParameterSet& operator=(ParameterSet&&) noexcept = default;

    void add(std::string name, Tensor<Scalar> value)
    {
        if (find(name) != nullptr) {
            throw std::invalid_argument("duplicate parameter name '" + name + "'");
        }
        entries_.push_back({std::move(name), make_var(std::move(value), true)});
    }

    bool contains(const std::string& name) const { return find(name) != nullptr; }

    const Var<Scalar>& at(const std::string& name) const
    {
        const Entry* e = find(name);
        if (e == nullptr) {
            throw std::out_of_range("unknown parameter '" + name + "'");
        }
        return e->var;
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    Index total_elements() const
    {
        Index n = 0;
        for (const auto& e : entries_) {
            n += e.var->size();
        }
        return n;
    }

    void zero_grad()
    {
        for (auto& e : entries_) {
            e.var->clear_grad();
        }
    }

    void set_requires_grad(bool flag)
    {
        for (auto& e : entries_) {
            e.var->set_requires_grad(flag);
        }
    }

    std::vector<std::string> names() const
    {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) {
            out.push_back(e.name);
        }
        return out;
    }

private:
    const Entry* find(const std::string& name) const
    {
        for (const auto& e : entries_) {
            if (e.name == name) {
                return &e;
            }
        }
        return nullptr;
    }

    void copy_from(const ParameterSet& other)
    {
        entries_.reserve(other.entries_.size());
        for (const auto& e : other.entries_) {
            Tensor<Scalar> value(e.var->shape(), e.var->data());
            entries_.push_back({e.name, make_var(std::move(value), e.var->requires_grad())});
        }
    }

    std::vector<Entry> entries_;
};

/// Shape and byte equality.
template <typename Scalar>
bool bit_equal(const Tensor<Scalar>& a, const Tensor<Scalar>& b)
{
    if (a.shape() != b.shape()) {
        return false;
    }
    return a.size() == 0
        || std::memcmp(a.ptr(), b.ptr(), sizeof(Scalar) * static_cast<std::size_t>(a.size())) == 0;
}

} // namespace mseg
