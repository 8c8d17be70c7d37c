/// Text codec paired with a backend.
pub trait Tokenizer {
    /// Token ids for a prompt, including any template wrapping.
    fn encode_prompt(&self, prompt: &str) -> Vec<u32>;

    /// Token ids for continuation text (no template, no specials).
    fn encode_text(&self, text: &str) -> Vec<u32>;

    fn decode(&self, tokens: &[u32]) -> String;

    fn eos(&self) -> Option<u32>;
}

/// Byte-level tokenizer: ids `0..256` are raw bytes, followed by BOS and EOS.
///
/// Prompts are wrapped with a pass-through template (`BOS` followed by the
/// prompt bytes); the toy backend has no chat template.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const BOS: u32 = 256;
    pub const EOS: u32 = 257;
    pub const VOCAB_SIZE: usize = 258;

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    pub fn encode_prompt(&self, prompt: &str) -> Vec<u32> {
        std::iter::once(Self::BOS).chain(self.encode(prompt)).collect()
    }

    /// Lossy UTF-8 decode; special tokens are dropped.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

impl Tokenizer for ByteTokenizer {
    fn encode_prompt(&self, prompt: &str) -> Vec<u32> {
        ByteTokenizer::encode_prompt(self, prompt)
    }

    fn encode_text(&self, text: &str) -> Vec<u32> {
        self.encode(text)
    }

    fn decode(&self, tokens: &[u32]) -> String {
        ByteTokenizer::decode(self, tokens)
    }

    fn eos(&self) -> Option<u32> {
        Some(Self::EOS)
    }
}
