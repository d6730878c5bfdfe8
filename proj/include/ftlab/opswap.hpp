#pragma once

// The OpSwap task: algebraic simplification chains where each tier remaps
// the meanings of the written operators. Written symbols parse with standard
// precedence; evaluation reduces one subexpression per step, parenthesized
// groups first (leftmost), then operators ranked by the precedence of their
// *mapped meaning*, left to right. That order is what the worked tier-2 and
// tier-3 chains force: a written '-' that means '÷' reduces before a written
// '×' that means '+'.

#include <array>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ftlab/errors.hpp"
#include "ftlab/rational.hpp"
#include "ftlab/rng.hpp"

namespace ftlab::opswap {

enum class Op : std::uint8_t { Add = 0, Sub = 1, Mul = 2, Div = 3 };

inline const char* op_symbol(Op op) {
    switch (op) {
        case Op::Add: return "+";
        case Op::Sub: return "-";
        case Op::Mul: return "×";  // ×
        case Op::Div: return "÷";  // ÷
    }
    return "?";
}

/// 2 for multiplicative, 1 for additive.
inline int precedence(Op op) { return (op == Op::Mul || op == Op::Div) ? 2 : 1; }

// ---------------------------------------------------------------------------
// expression AST
// ---------------------------------------------------------------------------

struct Expr {
    // literal when lhs is null
    Rational value;
    Op op = Op::Add;
    std::unique_ptr<Expr> lhs;
    std::unique_ptr<Expr> rhs;
    bool parenthesized = false;

    bool is_literal() const { return lhs == nullptr; }

    static std::unique_ptr<Expr> literal(Rational v) {
        auto e = std::make_unique<Expr>();
        e->value = std::move(v);
        return e;
    }

    static std::unique_ptr<Expr> binary(Op op, std::unique_ptr<Expr> l, std::unique_ptr<Expr> r,
                                        bool paren = false) {
        auto e = std::make_unique<Expr>();
        e->op = op;
        e->lhs = std::move(l);
        e->rhs = std::move(r);
        e->parenthesized = paren;
        return e;
    }

    std::unique_ptr<Expr> clone() const {
        if (is_literal()) return literal(value);
        return binary(op, lhs->clone(), rhs->clone(), parenthesized);
    }

    friend bool operator==(const Expr& a, const Expr& b) {
        if (a.is_literal() != b.is_literal()) return false;
        if (a.is_literal()) return a.value == b.value;
        return a.op == b.op && a.parenthesized == b.parenthesized && *a.lhs == *b.lhs &&
               *a.rhs == *b.rhs;
    }
};

inline void render_into(const Expr& e, std::string& out) {
    if (e.is_literal()) {
        out += e.value.to_string();
        return;
    }
    if (e.parenthesized) out += "(";
    render_into(*e.lhs, out);
    out += " ";
    out += op_symbol(e.op);
    out += " ";
    render_into(*e.rhs, out);
    if (e.parenthesized) out += ")";
}

inline std::string render(const Expr& e) {
    std::string out;
    render_into(e, out);
    return out;
}

// ---------------------------------------------------------------------------
// parser (written symbols, standard precedence, parens recorded)
// ---------------------------------------------------------------------------

namespace detail {

struct Token {
    enum class Kind { Number, Operator, LParen, RParen, End } kind;
    Rational number;
    Op op = Op::Add;
    std::size_t pos = 0;
};

class Lexer {
public:
    explicit Lexer(const std::string& text) : text_(text) { advance(); }

    const Token& peek() const { return current_; }

    Token take() {
        Token t = current_;
        advance();
        return t;
    }

private:
    void advance() {
        while (i_ < text_.size() && text_[i_] == ' ') ++i_;
        current_.pos = i_;
        if (i_ >= text_.size()) {
            current_.kind = Token::Kind::End;
            return;
        }
        const unsigned char c = static_cast<unsigned char>(text_[i_]);

        // a '-' glued to a digit in operand position starts a negative literal
        const bool operand_position = last_kind_ != Token::Kind::Number && last_kind_ != Token::Kind::RParen;
        if (std::isdigit(c) || (c == '-' && operand_position && i_ + 1 < text_.size() &&
                                std::isdigit(static_cast<unsigned char>(text_[i_ + 1])))) {
            lex_number();
        } else if (c == '(') {
            current_.kind = Token::Kind::LParen;
            ++i_;
        } else if (c == ')') {
            current_.kind = Token::Kind::RParen;
            ++i_;
        } else if (c == '+') {
            set_op(Op::Add, 1);
        } else if (c == '-') {
            set_op(Op::Sub, 1);
        } else if (c == '*') {
            set_op(Op::Mul, 1);
        } else if (c == '/') {
            set_op(Op::Div, 1);
        } else if (c == 0xc3 && i_ + 1 < text_.size() &&
                   static_cast<unsigned char>(text_[i_ + 1]) == 0x97) {
            set_op(Op::Mul, 2);  // ×
        } else if (c == 0xc3 && i_ + 1 < text_.size() &&
                   static_cast<unsigned char>(text_[i_ + 1]) == 0xb7) {
            set_op(Op::Div, 2);  // ÷
        } else {
            throw ParseError("unexpected character '" + text_.substr(i_, 1) + "'", i_);
        }
        last_kind_ = current_.kind;
    }

    void set_op(Op op, std::size_t width) {
        current_.kind = Token::Kind::Operator;
        current_.op = op;
        i_ += width;
    }

    void lex_number() {
        const std::size_t start = i_;
        if (text_[i_] == '-') ++i_;
        while (i_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[i_]))) ++i_;
        // a '/' glued between digits continues the literal as a fraction
        if (i_ + 1 < text_.size() && text_[i_] == '/' &&
            std::isdigit(static_cast<unsigned char>(text_[i_ + 1]))) {
            ++i_;
            while (i_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[i_]))) ++i_;
        }
        const std::string token = text_.substr(start, i_ - start);
        auto parsed = Rational::try_parse(token);
        if (!parsed) throw ParseError("invalid number '" + token + "'", start);
        current_.kind = Token::Kind::Number;
        current_.number = *parsed;
    }

    const std::string& text_;
    std::size_t i_ = 0;
    Token current_;
    Token::Kind last_kind_ = Token::Kind::End;
};

class Parser {
public:
    explicit Parser(const std::string& text) : lexer_(text) {}

    std::unique_ptr<Expr> parse() {
        if (lexer_.peek().kind == Token::Kind::End) throw ParseError("empty expression", 0);
        auto e = parse_additive();
        const auto& t = lexer_.peek();
        if (t.kind != Token::Kind::End) throw ParseError("unexpected trailing token", t.pos);
        return e;
    }

private:
    std::unique_ptr<Expr> parse_additive() {
        auto left = parse_multiplicative();
        while (lexer_.peek().kind == Token::Kind::Operator &&
               precedence(lexer_.peek().op) == 1) {
            const Op op = lexer_.take().op;
            left = Expr::binary(op, std::move(left), parse_multiplicative());
        }
        return left;
    }

    std::unique_ptr<Expr> parse_multiplicative() {
        auto left = parse_factor();
        while (lexer_.peek().kind == Token::Kind::Operator &&
               precedence(lexer_.peek().op) == 2) {
            const Op op = lexer_.take().op;
            left = Expr::binary(op, std::move(left), parse_factor());
        }
        return left;
    }

    std::unique_ptr<Expr> parse_factor() {
        const Token t = lexer_.peek();
        if (t.kind == Token::Kind::Number) {
            lexer_.take();
            return Expr::literal(t.number);
        }
        if (t.kind == Token::Kind::LParen) {
            lexer_.take();
            auto inner = parse_additive();
            const Token close = lexer_.peek();
            if (close.kind != Token::Kind::RParen) {
                throw ParseError("expected ')'", close.pos);
            }
            lexer_.take();
            inner->parenthesized = true;
            return inner;
        }
        if (t.kind == Token::Kind::Operator) {
            throw ParseError(std::string("stray operator '") + op_symbol(t.op) + "'", t.pos);
        }
        if (t.kind == Token::Kind::RParen) throw ParseError("unbalanced ')'", t.pos);
        throw ParseError("expected a number or '('", t.pos);
    }

    Lexer lexer_;
};

}  // namespace detail

inline std::unique_ptr<Expr> parse_expression(const std::string& text) {
    return detail::Parser(text).parse();
}

// ---------------------------------------------------------------------------
// tier mappings
// ---------------------------------------------------------------------------

/// Bijection written-op -> meaning-op for one difficulty tier.
struct TierMapping {
    int tier = 0;
    std::array<Op, 4> meaning{Op::Add, Op::Sub, Op::Mul, Op::Div};

    Op apply(Op written) const { return meaning[static_cast<std::size_t>(written)]; }

    bool is_bijection() const {
        std::array<bool, 4> seen{};
        for (Op m : meaning) seen[static_cast<std::size_t>(m)] = true;
        return seen[0] && seen[1] && seen[2] && seen[3];
    }

    TierMapping inverse() const {
        TierMapping inv;
        inv.tier = tier;
        for (std::size_t w = 0; w < 4; ++w) {
            inv.meaning[static_cast<std::size_t>(meaning[w])] = static_cast<Op>(w);
        }
        return inv;
    }
};

inline TierMapping tier_mapping(int tier) {
    TierMapping m;
    m.tier = tier;
    switch (tier) {
        case 0:
            break;
        case 1:  // + <-> ×
            m.meaning = {Op::Mul, Op::Sub, Op::Add, Op::Div};
            break;
        case 2:  // + <-> ×, - <-> ÷
            m.meaning = {Op::Mul, Op::Div, Op::Add, Op::Sub};
            break;
        case 3:  // + -> -, - -> ×, × -> ÷, ÷ -> +
            m.meaning = {Op::Sub, Op::Mul, Op::Div, Op::Add};
            break;
        default:
            throw ConfigError("unknown OpSwap tier " + std::to_string(tier) + " (expected 0-3)");
    }
    return m;
}

// ---------------------------------------------------------------------------
// stepwise reduction
// ---------------------------------------------------------------------------

namespace detail {

struct FlatLevel;

struct FlatItem {
    // literal when group is null
    Rational value;
    std::unique_ptr<FlatLevel> group;
};

struct FlatLevel {
    std::vector<FlatItem> items;  // items.size() == ops.size() + 1
    std::vector<Op> ops;
};

inline void flatten_into(const Expr& e, FlatLevel& level, bool ignore_paren) {
    if (e.is_literal()) {
        level.items.push_back({e.value, nullptr});
        return;
    }
    if (e.parenthesized && !ignore_paren) {
        auto group = std::make_unique<FlatLevel>();
        flatten_into(e, *group, true);
        // a parenthesized bare literal carries no reducible content
        if (group->ops.empty()) {
            level.items.push_back(std::move(group->items[0]));
        } else {
            level.items.push_back({Rational(), std::move(group)});
        }
        return;
    }
    flatten_into(*e.lhs, level, false);
    level.ops.push_back(e.op);
    flatten_into(*e.rhs, level, false);
}

inline FlatLevel flatten(const Expr& e) {
    FlatLevel level;
    flatten_into(e, level, true);
    return level;
}

inline void render_level(const FlatLevel& level, std::string& out) {
    for (std::size_t i = 0; i < level.items.size(); ++i) {
        if (i) {
            out += " ";
            out += op_symbol(level.ops[i - 1]);
            out += " ";
        }
        const FlatItem& item = level.items[i];
        if (item.group) {
            out += "(";
            render_level(*item.group, out);
            out += ")";
        } else {
            out += item.value.to_string();
        }
    }
}

inline std::string render_level(const FlatLevel& level) {
    std::string out;
    render_level(level, out);
    return out;
}

inline Rational apply_op(Op meaning, const Rational& a, const Rational& b, const std::string& step) {
    switch (meaning) {
        case Op::Add: return a + b;
        case Op::Sub: return a - b;
        case Op::Mul: return a * b;
        case Op::Div:
            if (b.is_zero()) {
                throw ArithmeticError("division by zero while reducing '" + step + "'");
            }
            return a / b;
    }
    throw ArithmeticError("unknown operator");
}

/// Performs exactly one reduction: the leftmost-innermost parenthesized
/// group if any, otherwise the leftmost operator whose mapped meaning has
/// the highest precedence. Returns false when already a single literal.
inline bool reduce_once(FlatLevel& level, const TierMapping& tier) {
    for (std::size_t i = 0; i < level.items.size(); ++i) {
        FlatItem& item = level.items[i];
        if (!item.group) continue;
        reduce_once(*item.group, tier);
        if (item.group->ops.empty()) {
            // fully reduced: drop the parentheses in the same step
            FlatItem replacement = std::move(item.group->items[0]);
            level.items[i] = std::move(replacement);
        }
        return true;
    }
    if (level.ops.empty()) return false;
    int best = 0;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < level.ops.size(); ++i) {
        const int p = precedence(tier.apply(level.ops[i]));
        if (p > best) {
            best = p;
            idx = i;
        }
    }
    std::string step = level.items[idx].value.to_string();
    step += " ";
    step += op_symbol(level.ops[idx]);
    step += " ";
    step += level.items[idx + 1].value.to_string();
    level.items[idx].value =
        apply_op(tier.apply(level.ops[idx]), level.items[idx].value, level.items[idx + 1].value, step);
    level.items.erase(level.items.begin() + static_cast<std::ptrdiff_t>(idx) + 1);
    level.ops.erase(level.ops.begin() + static_cast<std::ptrdiff_t>(idx));
    return true;
}

}  // namespace detail

/// Value of the expression with each written operator executed as its
/// tier-mapped meaning.
inline Rational evaluate(const Expr& expr, const TierMapping& tier) {
    auto level = detail::flatten(expr);
    while (detail::reduce_once(level, tier)) {
    }
    return level.items[0].value;
}

namespace detail {

struct ChainConstraints {
    bool integer_only = false;
    std::optional<std::pair<std::int64_t, std::int64_t>> value_range;

    bool admits(const Rational& v) const {
        if (integer_only && !v.is_integer()) return false;
        if (value_range &&
            (v < Rational(value_range->first) || Rational(value_range->second) < v)) {
            return false;
        }
        return true;
    }
};

inline bool all_literals_admissible(const FlatLevel& level, const ChainConstraints& c) {
    for (const auto& item : level.items) {
        if (item.group) {
            if (!all_literals_admissible(*item.group, c)) return false;
        } else if (!c.admits(item.value)) {
            return false;
        }
    }
    return true;
}

/// True when every reduction step satisfies the constraints.
inline bool chain_within(const Expr& expr, const TierMapping& tier, const ChainConstraints& c) {
    auto level = flatten(expr);
    if (!all_literals_admissible(level, c)) return false;
    while (reduce_once(level, tier)) {
        if (!all_literals_admissible(level, c)) return false;
    }
    return true;
}

}  // namespace detail

/// One rendered expression per reduction step, starting with the input and
/// ending with the canonical answer.
inline std::vector<std::string> simplification_chain(const Expr& expr, const TierMapping& tier) {
    auto level = detail::flatten(expr);
    std::vector<std::string> steps;
    steps.push_back(detail::render_level(level));
    while (detail::reduce_once(level, tier)) {
        steps.push_back(detail::render_level(level));
    }
    return steps;
}

inline std::string join_chain(const std::vector<std::string>& steps) {
    std::string out;
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (i) out += " = ";
        out += steps[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

struct OpSwapExample {
    int tier = 0;
    std::string expression_text;
    std::vector<std::string> chain;
    Rational answer;
    std::uint64_t seed = 0;
};

struct GeneratorOptions {
    std::pair<int, int> op_count_range{3, 5};
    std::pair<int, int> operand_range{1, 9};
    /// Reject examples whose answer coincides with the tier-0 value, so EM
    /// on tiers >= 1 measures remapped semantics rather than overlap.
    bool distinct_from_tier0 = false;
    /// Reject examples whose chain passes through a non-integer value,
    /// keeping a corpus inside integer arithmetic for small-model studies.
    bool integer_chain_only = false;
    /// When set, reject examples whose chain passes through a value outside
    /// [first, second]. Bounds the arithmetic a small model must learn.
    std::optional<std::pair<std::int64_t, std::int64_t>> value_range;
    double extra_paren_probability = 0.15;
};

namespace detail {

inline std::unique_ptr<Expr> random_tree(Rng& rng, int n_ops, const GeneratorOptions& opt) {
    if (n_ops == 0) {
        return Expr::literal(
            Rational(rng.next_int(opt.operand_range.first, opt.operand_range.second)));
    }
    const int left_ops = static_cast<int>(rng.next_int(0, n_ops - 1));
    auto left = random_tree(rng, left_ops, opt);
    auto right = random_tree(rng, n_ops - 1 - left_ops, opt);
    const Op op = static_cast<Op>(rng.next_int(0, 3));
    return Expr::binary(op, std::move(left), std::move(right));
}

/// Marks the parentheses without which rendering would re-associate, plus
/// occasional redundant ones.
inline void assign_parens(Expr& e, Rng& rng, const GeneratorOptions& opt, bool is_root) {
    if (e.is_literal()) return;
    assign_parens(*e.lhs, rng, opt, false);
    assign_parens(*e.rhs, rng, opt, false);
    if (!e.lhs->is_literal()) {
        const bool required = precedence(e.lhs->op) < precedence(e.op);
        e.lhs->parenthesized = required || rng.next_bool(opt.extra_paren_probability);
    }
    if (!e.rhs->is_literal()) {
        const bool required = precedence(e.rhs->op) <= precedence(e.op);
        e.rhs->parenthesized = required || rng.next_bool(opt.extra_paren_probability);
    }
    if (is_root) e.parenthesized = false;
}

}  // namespace detail

inline std::vector<OpSwapExample> generate_dataset(int tier, std::size_t n, std::uint64_t seed,
                                                   const GeneratorOptions& options = {}) {
    if (n == 0) throw ConfigError("generate_dataset: n must be >= 1");
    if (options.op_count_range.first < 0 || options.op_count_range.second < options.op_count_range.first) {
        throw ConfigError("generate_dataset: empty op_count_range");
    }
    if (options.operand_range.second < options.operand_range.first) {
        throw ConfigError("generate_dataset: empty operand_range");
    }
    const TierMapping mapping = tier_mapping(tier);
    const TierMapping tier0 = tier_mapping(0);

    std::vector<OpSwapExample> out;
    out.reserve(n);
    std::size_t rejects_in_a_row = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t example_seed = derive_seed(seed, i);
        Rng rng(example_seed);
        for (;;) {
            if (rejects_in_a_row > 500) {
                throw GenerationStuckError(
                    "generate_dataset: over 99% of candidate expressions rejected; "
                    "operand/op-count ranges look pathological");
            }
            const int k = static_cast<int>(
                rng.next_int(options.op_count_range.first, options.op_count_range.second));
            auto expr = detail::random_tree(rng, k, options);
            detail::assign_parens(*expr, rng, options, true);
            try {
                const Rational answer = evaluate(*expr, mapping);
                if (options.distinct_from_tier0 && tier != 0 && answer == evaluate(*expr, tier0)) {
                    ++rejects_in_a_row;
                    continue;
                }
                if (options.integer_chain_only || options.value_range) {
                    detail::ChainConstraints constraints{options.integer_chain_only,
                                                         options.value_range};
                    if (!detail::chain_within(*expr, mapping, constraints)) {
                        ++rejects_in_a_row;
                        continue;
                    }
                }
                OpSwapExample ex;
                ex.tier = tier;
                ex.expression_text = render(*expr);
                ex.chain = simplification_chain(*expr, mapping);
                ex.answer = answer;
                ex.seed = example_seed;
                out.push_back(std::move(ex));
                rejects_in_a_row = 0;
                break;
            } catch (const ArithmeticError&) {
                ++rejects_in_a_row;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// grading and serialization
// ---------------------------------------------------------------------------

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace detail

/// 1 iff the final '='-separated segment of the prediction parses as a
/// rational equal to gold in lowest terms; anything unparseable scores 0.
inline int exact_match_score(const std::string& prediction, const Rational& gold) {
    const std::size_t eq = prediction.rfind('=');
    const std::string tail =
        detail::trim(eq == std::string::npos ? prediction : prediction.substr(eq + 1));
    const auto parsed = Rational::try_parse(tail);
    if (!parsed) return 0;
    return *parsed == gold ? 1 : 0;
}

inline nlohmann::json to_json(const OpSwapExample& ex) {
    return nlohmann::json{{"tier", ex.tier},
                          {"question", ex.expression_text},
                          {"chain", join_chain(ex.chain)},
                          {"answer", ex.answer.to_string()},
                          {"seed", ex.seed}};
}

inline void write_jsonl(const std::vector<OpSwapExample>& examples, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const auto& ex : examples) out << to_json(ex).dump() << "\n";
}

inline std::vector<OpSwapExample> load_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::vector<OpSwapExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw LoadError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
        }
        if (!obj.contains("question") || !obj.contains("answer")) {
            throw LoadError("line " + std::to_string(line_no) +
                            ": expected \"question\" and \"answer\" fields");
        }
        OpSwapExample ex;
        ex.tier = obj.value("tier", 0);
        ex.expression_text = obj["question"].get<std::string>();
        const auto answer = Rational::try_parse(obj["answer"].get<std::string>());
        if (!answer) {
            throw LoadError("line " + std::to_string(line_no) + ": unparseable answer '" +
                            obj["answer"].get<std::string>() + "'");
        }
        ex.answer = *answer;
        ex.seed = obj.value("seed", 0ULL);
        if (obj.contains("chain")) {
            const std::string joined = obj["chain"].get<std::string>();
            std::size_t start = 0;
            while (true) {
                const std::size_t sep = joined.find(" = ", start);
                if (sep == std::string::npos) {
                    ex.chain.push_back(joined.substr(start));
                    break;
                }
                ex.chain.push_back(joined.substr(start, sep - start));
                start = sep + 3;
            }
        }
        out.push_back(std::move(ex));
    }
    return out;
}

/// Chat-format export: question as the user turn, the full chain as the
/// assistant turn. Readable by data::load_jsonl_chat.
inline nlohmann::json to_chat_json(const OpSwapExample& ex, const std::string& system_prompt = "") {
    nlohmann::json messages = nlohmann::json::array();
    if (!system_prompt.empty()) {
        messages.push_back({{"role", "system"}, {"content", system_prompt}});
    }
    messages.push_back({{"role", "user"}, {"content", ex.expression_text}});
    messages.push_back({{"role", "assistant"}, {"content", join_chain(ex.chain)}});
    return nlohmann::json{{"messages", messages},
                          {"tier", ex.tier},
                          {"answer", ex.answer.to_string()}};
}

inline void write_chat_jsonl(const std::vector<OpSwapExample>& examples, const std::string& path,
                             const std::string& system_prompt = "") {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const auto& ex : examples) out << to_chat_json(ex, system_prompt).dump() << "\n";
}

}  // namespace ftlab::opswap
