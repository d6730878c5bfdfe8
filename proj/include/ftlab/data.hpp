#pragma once

// Chat-format dataset handling: JSONL ingestion, byte-level tokenization
// with role delimiters, the uniform-stride interleaving mitigation and the
// deterministic train/eval split.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ftlab/errors.hpp"
#include "ftlab/rng.hpp"

namespace ftlab::data {

enum class Role : std::uint8_t { System, User, Assistant };

inline const char* role_name(Role r) {
    switch (r) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
    }
    return "?";
}

struct Message {
    Role role;
    std::string content;
};

struct ChatExample {
    std::vector<Message> messages;
    std::string source_tag;

    bool has_assistant() const {
        for (const auto& m : messages) {
            if (m.role == Role::Assistant) return true;
        }
        return false;
    }
};

// ---------------------------------------------------------------------------
// JSONL ingestion
// ---------------------------------------------------------------------------

inline Role parse_role(const std::string& name, std::size_t line_no) {
    if (name == "system") return Role::System;
    if (name == "user") return Role::User;
    if (name == "assistant") return Role::Assistant;
    throw LoadError("line " + std::to_string(line_no) + ": unknown role '" + name + "'");
}

/// One JSON object per line with a "messages" array of {role, content}.
inline std::vector<ChatExample> load_jsonl_chat(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open '" + path + "' for reading");
    std::vector<ChatExample> out;
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
        if (!obj.contains("messages") || !obj["messages"].is_array()) {
            throw LoadError("line " + std::to_string(line_no) + ": missing \"messages\" array");
        }
        ChatExample ex;
        ex.source_tag = path;
        for (const auto& m : obj["messages"]) {
            if (!m.contains("role") || !m.contains("content") || !m["role"].is_string() ||
                !m["content"].is_string()) {
                throw LoadError("line " + std::to_string(line_no) +
                                ": message needs string \"role\" and \"content\"");
            }
            ex.messages.push_back(
                {parse_role(m["role"].get<std::string>(), line_no), m["content"].get<std::string>()});
        }
        if (!ex.has_assistant()) {
            throw LoadError("line " + std::to_string(line_no) + ": no assistant message");
        }
        out.push_back(std::move(ex));
    }
    return out;
}

inline nlohmann::json to_json(const ChatExample& ex) {
    nlohmann::json messages = nlohmann::json::array();
    for (const auto& m : ex.messages) {
        messages.push_back({{"role", role_name(m.role)}, {"content", m.content}});
    }
    return nlohmann::json{{"messages", messages}};
}

inline void write_jsonl_chat(const std::vector<ChatExample>& examples, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open '" + path + "' for writing");
    for (const auto& ex : examples) out << to_json(ex).dump() << "\n";
}

// ---------------------------------------------------------------------------
// byte-level tokenizer
// ---------------------------------------------------------------------------

/// 256 byte tokens plus BOS/EOS and one delimiter per role. Total coverage
/// with no trained vocabulary keeps tokenization deterministic.
struct TokenizerSpec {
    static constexpr std::uint32_t kBos = 256;
    static constexpr std::uint32_t kEos = 257;
    static constexpr std::uint32_t kSystem = 258;
    static constexpr std::uint32_t kUser = 259;
    static constexpr std::uint32_t kAssistant = 260;

    std::uint32_t vocab_size() const { return 261; }

    std::uint32_t role_token(Role r) const {
        switch (r) {
            case Role::System: return kSystem;
            case Role::User: return kUser;
            case Role::Assistant: return kAssistant;
        }
        return kSystem;
    }

    std::vector<std::uint32_t> encode_bytes(const std::string& text) const {
        std::vector<std::uint32_t> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(c);
        return ids;
    }

    /// Inverse of encode_bytes; non-byte (special) tokens decode to nothing.
    std::string decode_bytes(const std::vector<std::uint32_t>& ids) const {
        std::string out;
        out.reserve(ids.size());
        for (std::uint32_t id : ids) {
            if (id < 256) out.push_back(static_cast<char>(id));
        }
        return out;
    }
};

struct TokenizedExample {
    std::vector<std::uint32_t> ids;
    std::vector<bool> completion_mask;  // true on assistant content and its closing EOS
    bool truncated = false;
};

/// Role-delimited rendering: BOS, then per message a role token followed by
/// content bytes; assistant turns close with EOS. Sequences longer than
/// context_length are right-truncated (the caller logs how many).
inline TokenizedExample tokenize(const ChatExample& example, const TokenizerSpec& spec,
                                 std::size_t context_length) {
    TokenizedExample out;
    out.ids.push_back(TokenizerSpec::kBos);
    out.completion_mask.push_back(false);
    for (const auto& m : example.messages) {
        out.ids.push_back(spec.role_token(m.role));
        out.completion_mask.push_back(false);
        const bool is_assistant = m.role == Role::Assistant;
        for (unsigned char c : m.content) {
            out.ids.push_back(c);
            out.completion_mask.push_back(is_assistant);
        }
        if (is_assistant) {
            out.ids.push_back(TokenizerSpec::kEos);
            out.completion_mask.push_back(true);
        }
    }
    if (out.ids.size() > context_length) {
        out.ids.resize(context_length);
        out.completion_mask.resize(context_length);
        out.truncated = true;
    }
    return out;
}

/// Prompt prefix for generation: everything up to and including the
/// assistant role token of the turn to be produced.
inline std::vector<std::uint32_t> prompt_ids(const ChatExample& example, const TokenizerSpec& spec) {
    std::vector<std::uint32_t> ids;
    ids.push_back(TokenizerSpec::kBos);
    for (const auto& m : example.messages) {
        if (m.role == Role::Assistant) break;
        ids.push_back(spec.role_token(m.role));
        for (unsigned char c : m.content) ids.push_back(c);
    }
    ids.push_back(TokenizerSpec::kAssistant);
    return ids;
}

// ---------------------------------------------------------------------------
// interleaving mitigation
// ---------------------------------------------------------------------------

/// Inserts round(fraction * |task|) safe examples at an even stride through
/// the task stream: one safe example after every ceil(|task|/k) task rows.
/// Safe rows are drawn without replacement (reshuffling per cycle if the
/// pool is smaller), seeded. Task order is preserved.
inline std::vector<ChatExample> interleave(const std::vector<ChatExample>& task_data,
                                           const std::vector<ChatExample>& safe_data,
                                           double fraction, std::uint64_t seed) {
    if (fraction < 0.0 || fraction > 1.0) {
        throw ConfigError("interleave: fraction must be in [0, 1], got " + std::to_string(fraction));
    }
    const std::size_t k =
        static_cast<std::size_t>(std::llround(fraction * static_cast<double>(task_data.size())));
    if (k == 0) return task_data;
    if (safe_data.empty()) {
        throw ConfigError("interleave: fraction > 0 requires a nonempty safe corpus");
    }

    Rng rng(seed);
    std::vector<std::size_t> order(safe_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<const ChatExample*> picks;
    picks.reserve(k);
    std::size_t cursor = 0;
    for (std::size_t i = 0; i < k; ++i) {
        if (cursor == order.size()) {
            rng.shuffle(order);
            cursor = 0;
        }
        picks.push_back(&safe_data[order[cursor++]]);
    }

    const std::size_t stride = (task_data.size() + k - 1) / k;
    std::vector<ChatExample> out;
    out.reserve(task_data.size() + k);
    std::size_t next_pick = 0;
    std::size_t since_insert = 0;
    for (const auto& ex : task_data) {
        out.push_back(ex);
        if (++since_insert == stride && next_pick < picks.size()) {
            out.push_back(*picks[next_pick++]);
            since_insert = 0;
        }
    }
    while (next_pick < picks.size()) out.push_back(*picks[next_pick++]);
    return out;
}

// ---------------------------------------------------------------------------
// train/eval split
// ---------------------------------------------------------------------------

struct DatasetSplit {
    std::vector<ChatExample> train;
    std::vector<ChatExample> eval;
    double ratio = 0.9;
    std::uint64_t seed = 0;
};

/// Seeded shuffle then prefix/suffix split. Both sides must be nonempty.
inline DatasetSplit train_eval_split(const std::vector<ChatExample>& data, double ratio = 0.9,
                                     std::uint64_t seed = 0) {
    if (data.size() < 2) {
        throw SizeError("train_eval_split: need at least 2 examples, got " +
                        std::to_string(data.size()));
    }
    const std::size_t n_train =
        static_cast<std::size_t>(std::llround(ratio * static_cast<double>(data.size())));
    if (n_train == 0 || n_train >= data.size()) {
        throw SizeError("train_eval_split: ratio " + std::to_string(ratio) +
                        " leaves an empty split for " + std::to_string(data.size()) + " examples");
    }
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    DatasetSplit split;
    split.ratio = ratio;
    split.seed = seed;
    split.train.reserve(n_train);
    split.eval.reserve(data.size() - n_train);
    for (std::size_t i = 0; i < order.size(); ++i) {
        (i < n_train ? split.train : split.eval).push_back(data[order[i]]);
    }
    return split;
}

// ---------------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------------

inline std::uint64_t content_hash(const std::vector<ChatExample>& data) {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& ex : data) {
        for (const auto& m : ex.messages) {
            const char tag = static_cast<char>('0' + static_cast<int>(m.role));
            h = fnv1a(&tag, 1, h);
            h = fnv1a(m.content.data(), m.content.size(), h);
        }
    }
    return h;
}

/// Written next to every materialized mixture.
inline nlohmann::json dataset_manifest(const std::vector<std::string>& source_paths,
                                       const std::vector<ChatExample>& data, double fraction,
                                       std::uint64_t seed) {
    return nlohmann::json{{"sources", source_paths},
                          {"count", data.size()},
                          {"interleave_fraction", fraction},
                          {"seed", seed},
                          {"content_hash", content_hash(data)},
                          {"system_prompt_copied", false}};
}

}  // namespace ftlab::data
