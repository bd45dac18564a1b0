//! Fixed byte-level vocabulary and the chat serialization.
//!
//! Ids 0..=255 are raw UTF-8 bytes; four specials follow. A conversation is
//! serialized as
//!
//! ```text
//! BEGIN ( SEP <role bytes> 0x0A <content bytes> )* END
//! ```
//!
//! with role bytes `user`, `assistant` or `system`. The assistant span of a
//! message covers its content bytes plus the token that terminates it (the
//! next `SEP`, or the final `END`), so a fine-tuned model learns where to stop.

use crate::data::{Conversation, Role};

pub const PAD: u32 = 256;
pub const BEGIN: u32 = 257;
pub const END: u32 = 258;
pub const SEP: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// `BEGIN bytes END`, the unit of pre-training streams and perplexity.
pub fn encode_document(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BEGIN);
    out.extend(text.bytes().map(u32::from));
    out.push(END);
    out
}

/// Bytes back to text; specials are dropped and invalid UTF-8 is replaced.
pub fn decode(tokens: &[u32]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChatEncoding {
    pub tokens: Vec<u32>,
    /// Per token: part of an assistant span.
    pub assistant: Vec<bool>,
}

impl ChatEncoding {
    /// Next-token training targets and the response-only mask: position `i`
    /// predicts token `i + 1` and counts iff that token is in an assistant span.
    pub fn targets_and_mask(&self) -> (Vec<u32>, Vec<bool>) {
        let n = self.tokens.len().saturating_sub(1);
        (self.tokens[1..=n].to_vec(), self.assistant[1..=n].to_vec())
    }
}

fn push_header(tokens: &mut Vec<u32>, assistant: &mut Vec<bool>, role: Role) {
    tokens.push(SEP);
    tokens.extend(role.as_str().bytes().map(u32::from));
    tokens.push(u32::from(b'\n'));
    assistant.resize(tokens.len(), false);
}

/// Full conversation, closed with `END`.
pub fn encode_chat(conv: &Conversation) -> ChatEncoding {
    let mut tokens = vec![BEGIN];
    let mut assistant = vec![false];
    let mut open_assistant = false;
    for m in &conv.messages {
        if open_assistant {
            // terminator of the previous assistant message
            tokens.push(SEP);
            assistant.push(true);
            tokens.extend(m.role.as_str().bytes().map(u32::from));
            tokens.push(u32::from(b'\n'));
            assistant.resize(tokens.len(), false);
        } else {
            push_header(&mut tokens, &mut assistant, m.role);
        }
        let is_assistant = m.role == Role::Assistant;
        for b in m.content.bytes() {
            tokens.push(u32::from(b));
            assistant.push(is_assistant);
        }
        open_assistant = is_assistant;
    }
    tokens.push(END);
    assistant.push(open_assistant);
    ChatEncoding { tokens, assistant }
}

/// Conversation prefix followed by an open assistant header, ready for decoding.
pub fn encode_chat_prompt(conv: &Conversation) -> Vec<u32> {
    let mut tokens = vec![BEGIN];
    let mut assistant = vec![false];
    for m in &conv.messages {
        push_header(&mut tokens, &mut assistant, m.role);
        tokens.extend(m.content.bytes().map(u32::from));
    }
    push_header(&mut tokens, &mut assistant, Role::Assistant);
    tokens
}
