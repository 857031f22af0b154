//! Hash-chained block store.
//!
//! Chain files start with the ASCII magic `SPDL` and a big-endian `u16`
//! version (currently 1), followed by one record per block: a big-endian
//! `u32` byte length and the block's canonical encoding (body, then hash).

use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::crypto::{Hash256, NodeId, PublicKey};
use crate::learning::GradientVector;
use crate::{Error, IntegrityCheck, Result};

pub const CHAIN_MAGIC: &[u8; 4] = b"SPDL";
pub const CHAIN_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxKind {
    Register,
}

impl TxKind {
    fn code(self) -> u64 {
        match self {
            TxKind::Register => 0,
        }
    }

    fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(TxKind::Register),
            other => Err(Error::Decode(format!("unknown transaction kind {other}"))),
        }
    }
}

/// Node registration record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transaction {
    pub kind: TxKind,
    pub pk: PublicKey,
    pub id: NodeId,
    pub address: String,
    pub timestamp: u64,
}

impl Transaction {
    pub fn register(pk: PublicKey, address: impl Into<String>, timestamp: u64) -> Self {
        Self {
            kind: TxKind::Register,
            pk,
            id: NodeId::from_public_key(&pk),
            address: address.into(),
            timestamp,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        self.id == NodeId::from_public_key(&self.pk)
    }

    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.kind.code())
            .fixed(&self.pk.0)
            .fixed(self.id.as_bytes())
            .str(&self.address)
            .u64(self.timestamp);
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        Ok(Self {
            kind: TxKind::from_code(dec.u64()?)?,
            pk: PublicKey(dec.fixed()?),
            id: NodeId(Hash256(dec.fixed()?)),
            address: dec.string()?,
            timestamp: dec.u64()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub height: u64,
    pub epoch: u64,
    pub round: u64,
    pub prev_hash: Hash256,
    pub delta: GradientVector,
    pub proposer: NodeId,
    pub txs: Vec<Transaction>,
    pub hash: Hash256,
}

impl Block {
    /// Assembles a block and seals it with its hash.
    pub fn new(
        height: u64,
        epoch: u64,
        round: u64,
        prev_hash: Hash256,
        delta: GradientVector,
        proposer: NodeId,
        txs: Vec<Transaction>,
    ) -> Self {
        let mut block = Self {
            height,
            epoch,
            round,
            prev_hash,
            delta,
            proposer,
            txs,
            hash: Hash256::ZERO,
        };
        block.hash = block.compute_hash();
        block
    }

    fn encode_body(&self, enc: &mut Encoder) {
        enc.u64(self.height)
            .u64(self.epoch)
            .u64(self.round)
            .fixed(self.prev_hash.as_bytes())
            .f64s(self.delta.as_slice())
            .fixed(self.proposer.as_bytes())
            .u64(self.txs.len() as u64);
        for tx in &self.txs {
            tx.encode(enc);
        }
    }

    /// `H` over the canonical encoding of every field except `hash`.
    pub fn compute_hash(&self) -> Hash256 {
        let mut enc = Encoder::new();
        self.encode_body(&mut enc);
        Hash256::digest(enc.as_bytes())
    }

    pub fn is_sealed(&self) -> bool {
        self.hash == self.compute_hash()
    }

    pub fn encode(&self, enc: &mut Encoder) {
        self.encode_body(enc);
        enc.fixed(self.hash.as_bytes());
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        self.encode(&mut enc);
        enc.finish()
    }

    pub fn decode(dec: &mut Decoder<'_>) -> Result<Self> {
        let height = dec.u64()?;
        let epoch = dec.u64()?;
        let round = dec.u64()?;
        let prev_hash = Hash256(dec.fixed()?);
        let delta = GradientVector::new(dec.f64s()?).map_err(|e| Error::Decode(e.to_string()))?;
        let proposer = NodeId(Hash256(dec.fixed()?));
        let count = dec.u64()?;
        let mut txs = Vec::new();
        for _ in 0..count {
            txs.push(Transaction::decode(dec)?);
        }
        let hash = Hash256(dec.fixed()?);
        Ok(Self {
            height,
            epoch,
            round,
            prev_hash,
            delta,
            proposer,
            txs,
            hash,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut dec = Decoder::new(bytes);
        let block = Self::decode(&mut dec)?;
        dec.expect_end()?;
        Ok(block)
    }
}

/// Genesis block: height 0, zero parent, zero delta of dimension `dim`,
/// carrying the bootstrap registrations.
pub fn make_genesis(initial_nodes: Vec<Transaction>, dim: usize) -> Result<Block> {
    if initial_nodes.is_empty() {
        return Err(Error::invalid("genesis needs at least one registration"));
    }
    if dim == 0 {
        return Err(Error::invalid("model dimension must be positive"));
    }
    Ok(Block::new(
        0,
        0,
        0,
        Hash256::ZERO,
        GradientVector::zeros(dim),
        NodeId::ZERO,
        initial_nodes,
    ))
}

fn integrity(check: IntegrityCheck, detail: impl Into<String>) -> Error {
    Error::ChainIntegrity {
        check,
        detail: detail.into(),
    }
}

fn check_genesis(block: &Block) -> Result<()> {
    if block.height != 0 || block.prev_hash != Hash256::ZERO || !block.delta.is_zero() {
        return Err(integrity(
            IntegrityCheck::Genesis,
            "genesis must have height 0, zero parent and zero delta",
        ));
    }
    if !block.is_sealed() {
        return Err(integrity(IntegrityCheck::SelfHash, "genesis hash does not match its contents"));
    }
    Ok(())
}

fn check_link(parent: &Block, child: &Block) -> Result<()> {
    if child.height != parent.height + 1 {
        return Err(integrity(
            IntegrityCheck::Height,
            format!("expected height {}, got {}", parent.height + 1, child.height),
        ));
    }
    if child.prev_hash != parent.hash {
        return Err(integrity(
            IntegrityCheck::PrevHash,
            format!(
                "block {} points at {}, tip is {}",
                child.height,
                child.prev_hash.short(),
                parent.hash.short()
            ),
        ));
    }
    if !child.is_sealed() {
        return Err(integrity(
            IntegrityCheck::SelfHash,
            format!("block {} hash does not match its contents", child.height),
        ));
    }
    Ok(())
}

/// Ordered blocks starting at genesis.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    blocks: Vec<Block>,
}

impl Chain {
    pub fn new(genesis: Block) -> Result<Self> {
        check_genesis(&genesis)?;
        Ok(Self {
            blocks: vec![genesis],
        })
    }

    /// Wraps blocks without checking anything; pair with [`verify_chain`].
    pub fn from_blocks_unchecked(blocks: Vec<Block>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn genesis(&self) -> &Block {
        &self.blocks[0]
    }

    pub fn tip(&self) -> &Block {
        self.blocks.last().expect("chain always holds genesis")
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn append(&mut self, block: Block) -> Result<()> {
        check_link(self.tip(), &block)?;
        self.blocks.push(block);
        Ok(())
    }

    /// Drops every block above `len`; genesis always stays.
    pub fn truncate(&mut self, len: usize) {
        self.blocks.truncate(len.max(1));
    }

    pub fn verify(&self) -> Result<()> {
        let first = self
            .blocks
            .first()
            .ok_or_else(|| integrity(IntegrityCheck::Genesis, "empty chain"))?;
        check_genesis(first)?;
        for pair in self.blocks.windows(2) {
            check_link(&pair[0], &pair[1])?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHAIN_MAGIC);
        out.extend_from_slice(&CHAIN_VERSION.to_be_bytes());
        for block in &self.blocks {
            let bytes = block.to_bytes();
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(&bytes);
        }
        out
    }

    /// Parses a chain file image without checking links or hashes.
    pub fn decode_unverified(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..4] != CHAIN_MAGIC {
            return Err(Error::Decode("missing SPDL magic".into()));
        }
        let version = u16::from_be_bytes([bytes[4], bytes[5]]);
        if version != CHAIN_VERSION {
            return Err(Error::Decode(format!("unsupported chain version {version}")));
        }
        let mut pos = 6;
        let mut blocks = Vec::new();
        while pos < bytes.len() {
            let header = bytes
                .get(pos..pos + 4)
                .ok_or_else(|| Error::Decode(format!("truncated length at offset {pos}")))?;
            let len = u32::from_be_bytes(header.try_into().expect("4 bytes")) as usize;
            pos += 4;
            let body = bytes
                .get(pos..pos + len)
                .ok_or_else(|| Error::Decode(format!("truncated block at offset {pos}")))?;
            blocks.push(
                Block::from_bytes(body)
                    .map_err(|e| Error::Decode(format!("block at offset {pos}: {e}")))?,
            );
            pos += len;
        }
        Ok(Self { blocks })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let chain = Self::decode_unverified(bytes)?;
        chain.verify()?;
        Ok(chain)
    }
}

/// Returns `chain` extended by `block`.
pub fn append_block(mut chain: Chain, block: Block) -> Result<Chain> {
    chain.append(block)?;
    Ok(chain)
}

pub fn verify_chain(chain: &Chain) -> bool {
    chain.verify().is_ok()
}

pub fn export_chain(chain: &Chain, path: &Path) -> Result<()> {
    std::fs::write(path, chain.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn import_chain(path: &Path) -> Result<Chain> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Chain::from_bytes(&bytes)
}
