#pragma once

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by a reserved
// control block. encode() of plain text can only produce byte ids, so the
// reserved range is never emitted for corpus text.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace shine {

using TokenId = std::int32_t;

struct Tokenizer {
    static constexpr TokenId kByteCount = 256;
    static constexpr TokenId kEot = 256;        // context separator / end of message
    static constexpr TokenId kRecon = 257;      // reconstruction task command
    static constexpr TokenId kComp = 258;       // completion task command
    static constexpr TokenId kUser = 259;       // chat role marker
    static constexpr TokenId kAssistant = 260;  // chat role marker
    static constexpr TokenId kPad = 261;
    static constexpr TokenId kReservedEnd = 262;

    static std::vector<TokenId> encode(const std::string& text) {
        std::vector<TokenId> ids;
        ids.reserve(text.size());
        for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
        return ids;
    }

    static std::string decode(std::span<const TokenId> ids) {
        std::string out;
        out.reserve(ids.size());
        for (TokenId id : ids) {
            if (id >= 0 && id < kByteCount) {
                out.push_back(static_cast<char>(id));
            } else {
                out += control_name(id);
            }
        }
        return out;
    }

    static bool is_reserved(TokenId id) { return id >= kByteCount && id < kReservedEnd; }

    static std::string control_name(TokenId id) {
        switch (id) {
            case kEot: return "<|eot|>";
            case kRecon: return "<|recon|>";
            case kComp: return "<|comp|>";
            case kUser: return "<|usr|>";
            case kAssistant: return "<|assistant|>";
            case kPad: return "<|pad|>";
            default: return "<|unk:" + std::to_string(id) + "|>";
        }
    }

    // Published reserved-id table (the tokenizer manifest).
    static std::string manifest_json() {
        return std::string("{\n")
            + "  \"scheme\": \"byte\",\n"
            + "  \"byte_ids\": [0, 255],\n"
            + "  \"reserved\": {\n"
            + "    \"eot\": 256,\n"
            + "    \"recon\": 257,\n"
            + "    \"comp\": 258,\n"
            + "    \"usr\": 259,\n"
            + "    \"assistant\": 260,\n"
            + "    \"pad\": 261\n"
            + "  }\n"
            + "}\n";
    }
};

}  // namespace shine
