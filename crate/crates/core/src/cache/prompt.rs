use std::path::Path;

use super::{read_file, write_atomic, BinReader, BinWriter};
use crate::error::Result;
use crate::model::PromptHead;

const MAGIC: &[u8; 4] = b"OVCP";

impl PromptHead {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::new(MAGIC);
        w.str(self.prompt_id())
            .u32(self.num_classes() as u32)
            .u32(self.dim() as u32)
            .f32s(self.rows().iter().copied());
        for label in self.labels() {
            w.str(label);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8], origin: &str) -> Result<Self> {
        let mut r = BinReader::open(data, MAGIC, origin)?;
        let prompt_id = r.str("prompt_id")?;
        let k = r.u32("num_classes")? as usize;
        let d = r.u32("dim")? as usize;
        let rows = r.f32s(k.saturating_mul(d), "rows")?;
        let labels = (0..k)
            .map(|i| r.str(&format!("labels[{i}]")))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        PromptHead::new(prompt_id, rows, k, d, labels)
    }
}

pub fn write_prompt_head(path: &Path, head: &PromptHead) -> Result<()> {
    write_atomic(path, &head.to_bytes())
}

pub fn load_prompt_head(path: &Path) -> Result<PromptHead> {
    let data = read_file(path)?;
    PromptHead::from_bytes(&data, &path.display().to_string())
}
