#pragma once

// Arbitrary-precision integers and exact rationals. Magnitudes are base-2^32
// limb vectors; division is shift-subtract long division, which is plenty for
// the small values arithmetic chains produce.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ftlab/errors.hpp"

namespace ftlab {

class BigInt {
public:
    BigInt() = default;

    BigInt(std::int64_t v) {  // NOLINT(google-explicit-constructor)
        if (v < 0) {
            negative_ = true;
            // avoid overflow on INT64_MIN
            std::uint64_t mag = static_cast<std::uint64_t>(-(v + 1)) + 1;
            set_u64(mag);
        } else {
            set_u64(static_cast<std::uint64_t>(v));
        }
    }

    static BigInt from_decimal(const std::string& text) {
        if (text.empty()) throw ParseError("empty integer literal", 0);
        std::size_t i = 0;
        bool neg = false;
        if (text[0] == '-' || text[0] == '+') {
            neg = text[0] == '-';
            i = 1;
        }
        if (i == text.size()) throw ParseError("sign without digits", i);
        BigInt r;
        for (; i < text.size(); ++i) {
            if (!std::isdigit(static_cast<unsigned char>(text[i]))) {
                throw ParseError("invalid digit in integer literal", i);
            }
            r.mul_small(10);
            r.add_small(static_cast<std::uint32_t>(text[i] - '0'));
        }
        r.negative_ = neg && !r.is_zero();
        return r;
    }

    bool is_zero() const { return limbs_.empty(); }
    bool is_negative() const { return negative_; }

    BigInt negated() const {
        BigInt r = *this;
        if (!r.is_zero()) r.negative_ = !r.negative_;
        return r;
    }

    BigInt abs() const {
        BigInt r = *this;
        r.negative_ = false;
        return r;
    }

    friend BigInt operator+(const BigInt& a, const BigInt& b) {
        if (a.negative_ == b.negative_) {
            BigInt r;
            r.limbs_ = add_mag(a.limbs_, b.limbs_);
            r.negative_ = a.negative_ && !r.limbs_.empty();
            return r;
        }
        const int cmp = compare_mag(a.limbs_, b.limbs_);
        if (cmp == 0) return BigInt{};
        BigInt r;
        if (cmp > 0) {
            r.limbs_ = sub_mag(a.limbs_, b.limbs_);
            r.negative_ = a.negative_;
        } else {
            r.limbs_ = sub_mag(b.limbs_, a.limbs_);
            r.negative_ = b.negative_;
        }
        return r;
    }

    friend BigInt operator-(const BigInt& a, const BigInt& b) { return a + b.negated(); }

    friend BigInt operator*(const BigInt& a, const BigInt& b) {
        if (a.is_zero() || b.is_zero()) return BigInt{};
        BigInt r;
        r.limbs_.assign(a.limbs_.size() + b.limbs_.size(), 0);
        for (std::size_t i = 0; i < a.limbs_.size(); ++i) {
            std::uint64_t carry = 0;
            for (std::size_t j = 0; j < b.limbs_.size(); ++j) {
                std::uint64_t cur = static_cast<std::uint64_t>(a.limbs_[i]) * b.limbs_[j] +
                                    r.limbs_[i + j] + carry;
                r.limbs_[i + j] = static_cast<std::uint32_t>(cur);
                carry = cur >> 32;
            }
            r.limbs_[i + b.limbs_.size()] += static_cast<std::uint32_t>(carry);
        }
        r.trim();
        r.negative_ = a.negative_ != b.negative_;
        return r;
    }

    /// Quotient and remainder of |a| / |b| with sign handling as in C++
    /// (truncation toward zero; remainder takes the dividend's sign).
    static std::pair<BigInt, BigInt> divmod(const BigInt& a, const BigInt& b) {
        if (b.is_zero()) throw ArithmeticError("division by zero");
        if (compare_mag(a.limbs_, b.limbs_) < 0) return {BigInt{}, a};

        BigInt quotient, remainder;
        const std::size_t bits = a.limbs_.size() * 32;
        for (std::size_t k = bits; k-- > 0;) {
            remainder.shift_left_one();
            if ((a.limbs_[k / 32] >> (k % 32)) & 1u) remainder.set_bit0();
            if (compare_mag(remainder.limbs_, b.limbs_) >= 0) {
                remainder.limbs_ = sub_mag(remainder.limbs_, b.limbs_);
                quotient.ensure_bit(k);
            }
        }
        quotient.trim();
        remainder.trim();
        quotient.negative_ = (a.negative_ != b.negative_) && !quotient.is_zero();
        remainder.negative_ = a.negative_ && !remainder.is_zero();
        return {quotient, remainder};
    }

    friend BigInt operator/(const BigInt& a, const BigInt& b) { return divmod(a, b).first; }
    friend BigInt operator%(const BigInt& a, const BigInt& b) { return divmod(a, b).second; }

    static BigInt gcd(BigInt a, BigInt b) {
        a.negative_ = false;
        b.negative_ = false;
        while (!b.is_zero()) {
            BigInt r = a % b;
            a = b;
            b = r;
        }
        return a;
    }

    friend bool operator==(const BigInt& a, const BigInt& b) {
        return a.negative_ == b.negative_ && a.limbs_ == b.limbs_;
    }
    friend bool operator!=(const BigInt& a, const BigInt& b) { return !(a == b); }
    friend bool operator<(const BigInt& a, const BigInt& b) {
        if (a.negative_ != b.negative_) return a.negative_;
        const int cmp = compare_mag(a.limbs_, b.limbs_);
        return a.negative_ ? cmp > 0 : cmp < 0;
    }

    std::string to_string() const {
        if (is_zero()) return "0";
        std::vector<std::uint32_t> work = limbs_;
        std::string digits;
        while (!work.empty()) {
            // divide the magnitude by 10^9, collecting one 9-digit chunk
            std::uint64_t rem = 0;
            for (std::size_t i = work.size(); i-- > 0;) {
                std::uint64_t cur = (rem << 32) | work[i];
                work[i] = static_cast<std::uint32_t>(cur / 1000000000ULL);
                rem = cur % 1000000000ULL;
            }
            while (!work.empty() && work.back() == 0) work.pop_back();
            std::string chunk = std::to_string(rem);
            if (!work.empty()) chunk.insert(0, 9 - chunk.size(), '0');
            digits.insert(0, chunk);
        }
        return negative_ ? "-" + digits : digits;
    }

    double to_double() const {
        double r = 0;
        for (std::size_t i = limbs_.size(); i-- > 0;) r = r * 4294967296.0 + limbs_[i];
        return negative_ ? -r : r;
    }

private:
    void set_u64(std::uint64_t v) {
        limbs_.clear();
        while (v) {
            limbs_.push_back(static_cast<std::uint32_t>(v));
            v >>= 32;
        }
    }

    void trim() {
        while (!limbs_.empty() && limbs_.back() == 0) limbs_.pop_back();
        if (limbs_.empty()) negative_ = false;
    }

    void mul_small(std::uint32_t m) {
        std::uint64_t carry = 0;
        for (auto& limb : limbs_) {
            std::uint64_t cur = static_cast<std::uint64_t>(limb) * m + carry;
            limb = static_cast<std::uint32_t>(cur);
            carry = cur >> 32;
        }
        if (carry) limbs_.push_back(static_cast<std::uint32_t>(carry));
    }

    void add_small(std::uint32_t v) {
        std::uint64_t carry = v;
        for (auto& limb : limbs_) {
            if (!carry) return;
            std::uint64_t cur = limb + carry;
            limb = static_cast<std::uint32_t>(cur);
            carry = cur >> 32;
        }
        if (carry) limbs_.push_back(static_cast<std::uint32_t>(carry));
    }

    void shift_left_one() {
        std::uint32_t carry = 0;
        for (auto& limb : limbs_) {
            std::uint32_t next = limb >> 31;
            limb = (limb << 1) | carry;
            carry = next;
        }
        if (carry) limbs_.push_back(carry);
    }

    void set_bit0() {
        if (limbs_.empty()) limbs_.push_back(1);
        else limbs_[0] |= 1u;
    }

    void ensure_bit(std::size_t k) {
        if (limbs_.size() <= k / 32) limbs_.resize(k / 32 + 1, 0);
        limbs_[k / 32] |= (1u << (k % 32));
    }

    static int compare_mag(const std::vector<std::uint32_t>& a, const std::vector<std::uint32_t>& b) {
        if (a.size() != b.size()) return a.size() < b.size() ? -1 : 1;
        for (std::size_t i = a.size(); i-- > 0;) {
            if (a[i] != b[i]) return a[i] < b[i] ? -1 : 1;
        }
        return 0;
    }

    static std::vector<std::uint32_t> add_mag(const std::vector<std::uint32_t>& a,
                                              const std::vector<std::uint32_t>& b) {
        std::vector<std::uint32_t> r(std::max(a.size(), b.size()) + 1, 0);
        std::uint64_t carry = 0;
        for (std::size_t i = 0; i < r.size(); ++i) {
            std::uint64_t cur = carry;
            if (i < a.size()) cur += a[i];
            if (i < b.size()) cur += b[i];
            r[i] = static_cast<std::uint32_t>(cur);
            carry = cur >> 32;
        }
        while (!r.empty() && r.back() == 0) r.pop_back();
        return r;
    }

    // requires |a| >= |b|
    static std::vector<std::uint32_t> sub_mag(const std::vector<std::uint32_t>& a,
                                              const std::vector<std::uint32_t>& b) {
        std::vector<std::uint32_t> r = a;
        std::int64_t borrow = 0;
        for (std::size_t i = 0; i < r.size(); ++i) {
            std::int64_t cur = static_cast<std::int64_t>(r[i]) - borrow -
                               (i < b.size() ? static_cast<std::int64_t>(b[i]) : 0);
            if (cur < 0) {
                cur += 0x100000000LL;
                borrow = 1;
            } else {
                borrow = 0;
            }
            r[i] = static_cast<std::uint32_t>(cur);
        }
        while (!r.empty() && r.back() == 0) r.pop_back();
        return r;
    }

    std::vector<std::uint32_t> limbs_;  // base 2^32, little-endian
    bool negative_ = false;
};

/// Exact rational, always in lowest terms with a positive denominator;
/// zero is canonically 0/1.
class Rational {
public:
    Rational() : num_(0), den_(1) {}
    Rational(std::int64_t v) : num_(v), den_(1) {}  // NOLINT(google-explicit-constructor)

    Rational(BigInt numerator, BigInt denominator) : num_(std::move(numerator)), den_(std::move(denominator)) {
        if (den_.is_zero()) throw ArithmeticError("rational with zero denominator");
        normalize();
    }

    /// Parses "a", "-a", "a/b" or "-a/b" (no internal spaces). Returns
    /// nullopt on anything else.
    static std::optional<Rational> try_parse(const std::string& text) {
        if (text.empty()) return std::nullopt;
        const std::size_t slash = text.find('/');
        try {
            if (slash == std::string::npos) return Rational(BigInt::from_decimal(text), BigInt(1));
            if (slash == 0 || slash + 1 >= text.size()) return std::nullopt;
            const std::string den_text = text.substr(slash + 1);
            if (den_text[0] == '-' || den_text[0] == '+') return std::nullopt;
            return Rational(BigInt::from_decimal(text.substr(0, slash)),
                            BigInt::from_decimal(den_text));
        } catch (const Error&) {
            return std::nullopt;
        }
    }

    const BigInt& numerator() const { return num_; }
    const BigInt& denominator() const { return den_; }
    bool is_zero() const { return num_.is_zero(); }
    bool is_integer() const { return den_ == BigInt(1); }

    friend Rational operator+(const Rational& a, const Rational& b) {
        return Rational(a.num_ * b.den_ + b.num_ * a.den_, a.den_ * b.den_);
    }
    friend Rational operator-(const Rational& a, const Rational& b) {
        return Rational(a.num_ * b.den_ - b.num_ * a.den_, a.den_ * b.den_);
    }
    friend Rational operator*(const Rational& a, const Rational& b) {
        return Rational(a.num_ * b.num_, a.den_ * b.den_);
    }
    friend Rational operator/(const Rational& a, const Rational& b) {
        if (b.is_zero()) throw ArithmeticError("division by zero");
        return Rational(a.num_ * b.den_, a.den_ * b.num_);
    }

    friend bool operator==(const Rational& a, const Rational& b) {
        return a.num_ == b.num_ && a.den_ == b.den_;
    }
    friend bool operator!=(const Rational& a, const Rational& b) { return !(a == b); }
    friend bool operator<(const Rational& a, const Rational& b) {
        // denominators are positive, so cross-multiplication keeps the order
        return a.num_ * b.den_ < b.num_ * a.den_;
    }
    friend bool operator<=(const Rational& a, const Rational& b) { return a < b || a == b; }

    /// "10", "-7" or "2/3"; integers render without a denominator.
    std::string to_string() const {
        if (is_integer()) return num_.to_string();
        return num_.to_string() + "/" + den_.to_string();
    }

    double to_double() const { return num_.to_double() / den_.to_double(); }

private:
    void normalize() {
        if (den_.is_negative()) {
            den_ = den_.negated();
            num_ = num_.negated();
        }
        if (num_.is_zero()) {
            den_ = BigInt(1);
            return;
        }
        BigInt g = BigInt::gcd(num_, den_);
        if (g != BigInt(1)) {
            num_ = num_ / g;
            den_ = den_ / g;
        }
    }

    BigInt num_;
    BigInt den_;
};

}  // namespace ftlab
